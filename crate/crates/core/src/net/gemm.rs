//! Row-major GEMM shorthands over `matrixmultiply::dgemm`.

/// `c (m×n) = a (m×k) · wᵀ + beta·c`, with `w` stored `n×k`.
pub(crate) fn a_wt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) += aᵀ · b`, with `a` stored `k×m` and `b` stored `k×n`.
pub(crate) fn at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) = a (m×k) · b (k×n)`.
pub(crate) fn a_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        // a = [[1,2],[3,4]], w = [[5,6],[7,8],[9,10]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let w = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let mut c = [0.0; 6];
        a_wt(2, 2, 3, &a, &w, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 29.0, 39.0, 53.0, 67.0]);

        let mut c = [1.0; 4];
        at_b(2, 2, 2, &a, &a, &mut c);
        assert_eq!(c, [11.0, 15.0, 15.0, 21.0]);

        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c = [0.0; 6];
        a_b(2, 2, 3, &a, &b, &mut c);
        assert_eq!(c, [1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }
}
