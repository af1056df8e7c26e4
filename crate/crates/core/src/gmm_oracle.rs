//! Closed-form conditionals of the linear interpolant for Gaussian-mixture data.
//!
//! With `x_t = (1 − t)x₀ + t·x₁`, `x₁ ~ N(0, I)` and `x₀` drawn from a mixture
//! with components `N(μ_k, C_k)`, each component gives
//! `x_t | k ~ N((1 − t)μ_k, S_k)` with `S_k = (1 − t)²C_k + t²I`.
//!
//! The per-component expected velocity is written in a form that stays finite
//! as `t → 0`:
//!
//! ```text
//! v_k = (tI − (1 − t)C_k) S_k⁻¹ (x − (1 − t)μ_k) − μ_k
//! Cov[v_cond | x, k] = C_k S_k⁻¹
//! ```
//!
//! and the mixture quantities follow from the posterior responsibilities by
//! the law of total covariance. Below [`T_EPS`] the exact `t = 0` limit is
//! returned: `v = −x`, `Σ_v′ = I`, `E[x₀ | x] = x`, `Cov[x₀ | x] = 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Times at or below this use the analytic `t = 0` limit.
pub const T_EPS: f64 = 1e-6;

/// Component covariance, stored diagonally when possible.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn isotropic(d: usize, var: f64) -> Self {
        Covariance::Diagonal(DVector::from_element(d, var))
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    fn to_full(&self) -> Covariance {
        Covariance::Full(self.to_matrix())
    }
}

/// A Gaussian mixture `Σ_k w_k N(μ_k, C_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<Covariance>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Covariance>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("need at least one component".into()));
        }
        if means.len() != k || covs.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covs.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidMixture("dimension must be at least 1".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMixture("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        for (i, (m, c)) in means.iter().zip(&covs).enumerate() {
            if m.len() != d || c.dim() != d {
                return Err(Error::InvalidMixture(format!("component {i} has the wrong dimension")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {i} mean is not finite")));
            }
            match c {
                Covariance::Diagonal(v) => {
                    if v.iter().any(|e| !e.is_finite() || *e <= 0.0) {
                        return Err(Error::InvalidMixture(format!(
                            "component {i} covariance is not positive definite"
                        )));
                    }
                }
                Covariance::Full(mat) => {
                    if mat.ncols() != d || mat.iter().any(|e| !e.is_finite()) {
                        return Err(Error::InvalidMixture(format!("component {i} covariance is malformed")));
                    }
                    if (mat - mat.transpose()).amax() > 1e-12 * (1.0 + mat.amax()) {
                        return Err(Error::InvalidMixture(format!("component {i} covariance is not symmetric")));
                    }
                    if mat.clone().cholesky().is_none() {
                        return Err(Error::InvalidMixture(format!(
                            "component {i} covariance is not positive definite"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            weights,
            means: means.into_iter().map(DVector::from_vec).collect(),
            covs,
        })
    }

    /// Equal-weight mixture with a shared isotropic covariance.
    pub fn isotropic(means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, |m| m.len());
        Self::new(
            vec![1.0 / k.max(1) as f64; k],
            means,
            (0..k).map(|_| Covariance::isotropic(d, var)).collect(),
        )
    }

    pub fn d(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    pub fn covariance(&self, k: usize) -> &Covariance {
        &self.covs[k]
    }

    pub fn is_diagonal(&self) -> bool {
        self.covs.iter().all(|c| matches!(c, Covariance::Diagonal(_)))
    }

    /// Same mixture with every covariance stored as a full matrix.
    pub fn to_full(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self.covs.iter().map(Covariance::to_full).collect(),
        }
    }

    pub fn total_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.d());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    pub fn total_covariance(&self) -> DMatrix<f64> {
        let d = self.d();
        let m = self.total_mean();
        let mut c = DMatrix::zeros(d, d);
        for ((w, mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let dm = mu - &m;
            c += (cov.to_matrix() + &dm * dm.transpose()) * *w;
        }
        c
    }

    /// The mixture of `(x − shift) / scale`, with `scale` applied per axis.
    pub fn affine_standardize(&self, shift: &[f64], scale: &[f64]) -> Result<Self> {
        let d = self.d();
        if shift.len() != d || scale.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: shift.len().min(scale.len()),
            });
        }
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidMixture("scales must be positive".into()));
        }
        let inv = DVector::from_iterator(d, scale.iter().map(|s| 1.0 / s));
        let means = self
            .means
            .iter()
            .map(|mu| (0..d).map(|i| (mu[i] - shift[i]) * inv[i]).collect())
            .collect();
        let covs = self
            .covs
            .iter()
            .map(|c| match c {
                Covariance::Diagonal(v) => Covariance::Diagonal(v.component_mul(&inv).component_mul(&inv)),
                Covariance::Full(m) => {
                    let dm = DMatrix::from_diagonal(&inv);
                    Covariance::Full(&dm * m * &dm)
                }
            })
            .collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Draws `n` points from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let factors: Vec<DMatrix<f64>> = self.covs.iter().map(cov_sqrt).collect();
        let d = self.d();
        (0..n)
            .map(|_| {
                let k = pick(&self.weights, rng.random::<f64>());
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
                (&self.means[k] + &factors[k] * z).as_slice().to_vec()
            })
            .collect()
    }
}

/// Conditional statistics of the interpolant at `(x, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalStats {
    /// `v(x, t) = E[x₁ − x₀ | x_t = x]`.
    pub marginal_velocity: Vec<f64>,
    pub posterior_weights: Vec<f64>,
    pub cond_mean_x0: Vec<f64>,
    pub cond_cov_x0: DMatrix<f64>,
    /// `Σ_v′ = Cov[x₁ − x₀ | x_t = x]`.
    pub velocity_cov: DMatrix<f64>,
    /// `sqrt(Tr Σ_v′)`.
    pub total_std: f64,
}

/// Conditional law of `x₀` given `x_t = x` within one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentConditional {
    pub weight: f64,
    pub mean_x0: DVector<f64>,
    pub cov_x0: DMatrix<f64>,
}

fn check_inputs(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<()> {
    if x.len() != mix.d() {
        return Err(Error::DimensionMismatch {
            expected: mix.d(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("x"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(())
}

/// Per-component pieces shared by the oracle routines.
struct ComponentTerms {
    log_lik: f64,
    velocity: DVector<f64>,
    /// `C_k S_k⁻¹`; `None` when only the velocity was requested.
    velocity_cov: Option<DMatrix<f64>>,
}

fn component_terms(
    mix: &MixtureSpec,
    k: usize,
    x: &[f64],
    t: f64,
    want_cov: bool,
) -> Result<ComponentTerms> {
    let d = mix.d();
    let a = 1.0 - t;
    let mu = &mix.means[k];
    let q = DVector::from_iterator(d, (0..d).map(|i| x[i] - a * mu[i]));
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    match &mix.covs[k] {
        Covariance::Diagonal(c) => {
            let mut log_det = 0.0;
            let mut quad = 0.0;
            let mut velocity = DVector::zeros(d);
            let mut cov = want_cov.then(|| DMatrix::zeros(d, d));
            for i in 0..d {
                let s = a * a * c[i] + t * t;
                if !(s > 0.0) {
                    return Err(Error::SingularComponent { component: k });
                }
                let sq = q[i] / s;
                log_det += s.ln();
                quad += q[i] * sq;
                velocity[i] = (t - a * c[i]) * sq - mu[i];
                if let Some(m) = cov.as_mut() {
                    m[(i, i)] = c[i] / s;
                }
            }
            Ok(ComponentTerms {
                log_lik: -0.5 * (log_det + quad + d as f64 * log_2pi),
                velocity,
                velocity_cov: cov,
            })
        }
        Covariance::Full(c) => {
            let s = c * (a * a) + DMatrix::identity(d, d) * (t * t);
            let chol = s.cholesky().ok_or(Error::SingularComponent { component: k })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let sq = chol.solve(&q);
            let quad = q.dot(&sq);
            let velocity = (DMatrix::identity(d, d) * t - c * a) * &sq - mu;
            let cov = want_cov.then(|| {
                // C S⁻¹ = (S⁻¹ C)ᵀ since both are symmetric and commute.
                let m = chol.solve(c).transpose();
                (&m + m.transpose()) * 0.5
            });
            Ok(ComponentTerms {
                log_lik: -0.5 * (log_det + quad + d as f64 * log_2pi),
                velocity,
                velocity_cov: cov,
            })
        }
    }
}

fn normalize_log_weights(mix: &MixtureSpec, log_liks: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = log_liks
        .iter()
        .zip(&mix.weights)
        .map(|(l, w)| if *w > 0.0 { l + w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut post: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = post.iter().sum();
    for p in &mut post {
        *p /= z;
    }
    post
}

/// Posterior component responsibilities `p(k | x_t = x)`.
pub fn posterior_weights(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_inputs(mix, x, t)?;
    let log_liks = (0..mix.n_components())
        .map(|k| component_terms(mix, k, x, t, false).map(|c| c.log_lik))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_log_weights(mix, &log_liks))
}

/// Log density of `x_t` at `x`.
pub fn log_density(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<f64> {
    check_inputs(mix, x, t)?;
    let scores = (0..mix.n_components())
        .map(|k| component_terms(mix, k, x, t, false).map(|c| c.log_lik + mix.weights[k].ln()))
        .collect::<Result<Vec<_>>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln())
}

/// Marginal velocity `v(x, t)` alone; cheaper than [`conditional_stats`].
pub fn marginal_velocity(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_inputs(mix, x, t)?;
    if t <= T_EPS {
        return Ok(x.iter().map(|v| -v).collect());
    }
    let terms = (0..mix.n_components())
        .map(|k| component_terms(mix, k, x, t, false))
        .collect::<Result<Vec<_>>>()?;
    let log_liks: Vec<f64> = terms.iter().map(|c| c.log_lik).collect();
    let post = normalize_log_weights(mix, &log_liks);
    let mut v = DVector::zeros(mix.d());
    for (p, c) in post.iter().zip(&terms) {
        v += &c.velocity * *p;
    }
    Ok(v.as_slice().to_vec())
}

pub fn conditional_stats(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<ConditionalStats> {
    check_inputs(mix, x, t)?;
    let d = mix.d();
    let terms = (0..mix.n_components())
        .map(|k| component_terms(mix, k, x, t, true))
        .collect::<Result<Vec<_>>>()?;
    let log_liks: Vec<f64> = terms.iter().map(|c| c.log_lik).collect();
    let post = normalize_log_weights(mix, &log_liks);

    if t <= T_EPS {
        return Ok(ConditionalStats {
            marginal_velocity: x.iter().map(|v| -v).collect(),
            posterior_weights: post,
            cond_mean_x0: x.to_vec(),
            cond_cov_x0: DMatrix::zeros(d, d),
            velocity_cov: DMatrix::identity(d, d),
            total_std: (d as f64).sqrt(),
        });
    }

    let mut v = DVector::zeros(d);
    for (p, c) in post.iter().zip(&terms) {
        v += &c.velocity * *p;
    }
    let mut sigma = DMatrix::zeros(d, d);
    for (p, c) in post.iter().zip(&terms) {
        if *p == 0.0 {
            continue;
        }
        let dv = &c.velocity - &v;
        sigma += (c.velocity_cov.as_ref().unwrap() + &dv * dv.transpose()) * *p;
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let cond_mean = DVector::from_iterator(d, (0..d).map(|i| x[i] - t * v[i]));
    let total_std = sigma.trace().max(0.0).sqrt();
    Ok(ConditionalStats {
        marginal_velocity: v.as_slice().to_vec(),
        posterior_weights: post,
        cond_mean_x0: cond_mean.as_slice().to_vec(),
        cond_cov_x0: &sigma * (t * t),
        velocity_cov: sigma,
        total_std,
    })
}

/// Per-component Gaussian conditioning of `x₀` on `x_t = x`, via the textbook
/// formulas `m_k = μ_k + (1 − t)C_k S_k⁻¹(x − (1 − t)μ_k)` and
/// `C_k|t = C_k − (1 − t)²C_k S_k⁻¹ C_k`.
pub fn component_conditionals(mix: &MixtureSpec, x: &[f64], t: f64) -> Result<Vec<ComponentConditional>> {
    let post = posterior_weights(mix, x, t)?;
    let d = mix.d();
    let a = 1.0 - t;
    let xv = DVector::from_column_slice(x);
    (0..mix.n_components())
        .map(|k| {
            let c = mix.covs[k].to_matrix();
            let mu = &mix.means[k];
            let s = &c * (a * a) + DMatrix::identity(d, d) * (t * t);
            let chol = s.cholesky().ok_or(Error::SingularComponent { component: k })?;
            let gain = chol.solve(&c).transpose() * a; // (1 − t) C S⁻¹
            let mean_x0 = mu + &gain * (&xv - mu * a);
            let cov = &c - &gain * &c * a;
            Ok(ComponentConditional {
                weight: post[k],
                mean_x0,
                cov_x0: (&cov + cov.transpose()) * 0.5,
            })
        })
        .collect()
}

/// I.i.d. draws from `p(x₀ | x_t = x)`.
pub fn sample_posterior_x0<R: Rng + ?Sized>(
    mix: &MixtureSpec,
    x: &[f64],
    t: f64,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(mix, x, t)?;
    if t <= T_EPS {
        return Err(Error::TimeOutOfRange(t));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let comps = component_conditionals(mix, x, t)?;
    let weights: Vec<f64> = comps.iter().map(|c| c.weight).collect();
    let factors: Vec<DMatrix<f64>> = comps
        .iter()
        .map(|c| psd_sqrt(&c.cov_x0))
        .collect();
    let d = mix.d();
    Ok((0..n)
        .map(|_| {
            let k = pick(&weights, rng.random::<f64>());
            let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
            (&comps[k].mean_x0 + &factors[k] * z).as_slice().to_vec()
        })
        .collect())
}

/// Average velocity `(x_t − x_r) / (t − r)` along the exact probability-flow
/// ODE, integrated backwards from `t` to `r` with `steps` RK4 steps.
pub fn average_velocity(mix: &MixtureSpec, x: &[f64], r: f64, t: f64, steps: usize) -> Result<Vec<f64>> {
    check_inputs(mix, x, t)?;
    if !(0.0..=t).contains(&r) {
        return Err(Error::TimeOutOfRange(r));
    }
    if t - r == 0.0 {
        return marginal_velocity(mix, x, t);
    }
    let steps = steps.max(1);
    let h = (r - t) / steps as f64;
    let d = x.len();
    let mut y = x.to_vec();
    let mut s = t;
    let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> { (0..d).map(|i| y[i] + c * k[i]).collect() };
    for _ in 0..steps {
        let k1 = marginal_velocity(mix, &y, s)?;
        let k2 = marginal_velocity(mix, &axpy(&y, &k1, 0.5 * h), (s + 0.5 * h).clamp(0.0, 1.0))?;
        let k3 = marginal_velocity(mix, &axpy(&y, &k2, 0.5 * h), (s + 0.5 * h).clamp(0.0, 1.0))?;
        let k4 = marginal_velocity(mix, &axpy(&y, &k3, h), (s + h).clamp(0.0, 1.0))?;
        for i in 0..d {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s += h;
    }
    Ok((0..d).map(|i| (x[i] - y[i]) / (t - r)).collect())
}

/// Axis-aligned 2-D lattice, inclusive of both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    pub fn square(half_width: f64, n: usize) -> Self {
        Self {
            x_range: (-half_width, half_width),
            y_range: (-half_width, half_width),
            nx: n,
            ny: n,
        }
    }

    fn coord(range: (f64, f64), n: usize, i: usize) -> f64 {
        if n <= 1 {
            0.5 * (range.0 + range.1)
        } else {
            range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
        }
    }

    /// Lattice points in row-major order (`y` outer, `x` inner).
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            let y = Self::coord(self.y_range, self.ny, j);
            for i in 0..self.nx {
                pts.push([Self::coord(self.x_range, self.nx, i), y]);
            }
        }
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldRow {
    pub x0: f64,
    pub x1: f64,
    pub t: f64,
    pub total_std: f64,
}

/// `sqrt(Tr Σ_v′)` at every lattice point for every `t`.
pub fn variance_field_grid(mix: &MixtureSpec, t_list: &[f64], grid: &Lattice) -> Result<Vec<FieldRow>> {
    if mix.d() != 2 {
        return Err(Error::FieldDimension(mix.d()));
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::Config("lattice needs at least one point per axis".into()));
    }
    let pts = grid.points();
    let mut rows = Vec::with_capacity(pts.len() * t_list.len());
    for &t in t_list {
        for p in &pts {
            let s = conditional_stats(mix, p, t)?;
            rows.push(FieldRow {
                x0: p[0],
                x1: p[1],
                t,
                total_std: s.total_std,
            });
        }
    }
    Ok(rows)
}

pub fn write_field_csv<W: Write>(rows: &[FieldRow], w: &mut W) -> Result<()> {
    writeln!(w, "x0,x1,t,total_std")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x0, r.x1, r.t, r.total_std)?;
    }
    Ok(())
}

/// Three equal-weight modes on the vertices of an equilateral triangle of
/// circumradius 2, each with covariance `0.09·I`.
pub fn three_mode_fixture() -> MixtureSpec {
    three_mode_mixture(2.0, 0.09)
}

/// Same layout with any circumradius and isotropic component variance.
pub fn three_mode_mixture(radius: f64, var: f64) -> MixtureSpec {
    let means = (0..3)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect();
    MixtureSpec::isotropic(means, var).expect("valid fixture")
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn cov_sqrt(c: &Covariance) -> DMatrix<f64> {
    match c {
        Covariance::Diagonal(v) => DMatrix::from_diagonal(&v.map(f64::sqrt)),
        Covariance::Full(m) => psd_sqrt(m),
    }
}

/// A factor `L` with `L Lᵀ = m`, tolerating rank deficiency.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.unpack();
    }
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&scale)
}
