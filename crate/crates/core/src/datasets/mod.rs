//! Toy 2-D distributions, dense Gaussian mixtures, and the interpolant sampler.
//!
//! Every dataset is standardized per axis to zero mean and unit variance using
//! the exact moments of its generating law (closed form where available,
//! otherwise high-order quadrature over the curve parameter).

pub mod fixtures;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm_oracle::{Covariance, MixtureSpec};
use crate::rng::{stream_rng, Stream};
use fixtures::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Checkerboard,
    EightGaussians,
    TwoMoons,
    SwissRoll,
    TwoSpirals,
    Pinwheel,
    Dgmm,
}

impl DatasetKind {
    pub const TOYS: [DatasetKind; 6] = [
        DatasetKind::Checkerboard,
        DatasetKind::EightGaussians,
        DatasetKind::TwoMoons,
        DatasetKind::SwissRoll,
        DatasetKind::TwoSpirals,
        DatasetKind::Pinwheel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::EightGaussians => "eight_gaussians",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::SwissRoll => "swiss_roll",
            DatasetKind::TwoSpirals => "two_spirals",
            DatasetKind::Pinwheel => "pinwheel",
            DatasetKind::Dgmm => "dgmm",
        }
    }

    pub fn is_toy(self) -> bool {
        self != DatasetKind::Dgmm
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::TOYS
            .iter()
            .chain(std::iter::once(&DatasetKind::Dgmm))
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown dataset '{s}'")))
    }
}

fn default_d() -> usize {
    2
}

fn default_noise_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Mode count for `dgmm`; `2·d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgmm_modes: Option<usize>,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// Seed of the dataset's own layout (DGMM means). Independent of the
    /// training seed.
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn toy(kind: DatasetKind) -> Self {
        Self {
            kind,
            d: 2,
            dgmm_modes: None,
            noise_scale: 1.0,
            seed: 0,
        }
    }

    pub fn dgmm(d: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Dgmm,
            d,
            dgmm_modes: None,
            noise_scale: 1.0,
            seed,
        }
    }

    pub fn modes(&self) -> usize {
        self.dgmm_modes.unwrap_or(DGMM_MODES_PER_DIM * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_toy() && self.d != 2 {
            return Err(Error::Config(format!("{} is two-dimensional, got d = {}", self.kind, self.d)));
        }
        if self.kind == DatasetKind::Dgmm && (self.d == 0 || self.modes() == 0) {
            return Err(Error::Config("dgmm needs d >= 1 and at least one mode".into()));
        }
        if self.kind.is_toy() && self.dgmm_modes.is_some() {
            return Err(Error::Config("dgmm_modes only applies to dgmm".into()));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A validated dataset with its standardization precomputed.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// Raw (pre-standardization) DGMM means.
    dgmm_means: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let (dgmm_means, (shift, var)) = if spec.kind == DatasetKind::Dgmm {
            let means = dgmm_layout(&spec);
            let raw = raw_dgmm_mixture(&spec, &means)?;
            let m = raw.total_mean();
            let c = raw.total_covariance();
            let var = (0..spec.d).map(|i| c[(i, i)]).collect();
            (means, (m.as_slice().to_vec(), var))
        } else {
            (Vec::new(), toy_moments(spec.kind, spec.noise_scale))
        };
        let scale = var.iter().map(|v: &f64| v.sqrt()).collect();
        Ok(Self {
            spec,
            shift,
            scale,
            dgmm_means,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    /// Per-axis mean and standard deviation of the raw law.
    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    /// Draws `n` standardized points, row-major `n × d`.
    pub fn sample_flat<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let d = self.d();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let start = out.len();
            if self.spec.kind == DatasetKind::Dgmm {
                let k = rng.random_range(0..self.dgmm_means.len());
                let sd = DGMM_VARIANCE.sqrt();
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(self.dgmm_means[k][i] + sd * z);
                }
            } else {
                let p = raw_toy_point(self.spec.kind, self.spec.noise_scale, rng);
                out.extend_from_slice(&p);
            }
            for i in 0..d {
                out[start + i] = (out[start + i] - self.shift[i]) / self.scale[i];
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        self.sample_flat(rng, n)
            .chunks_exact(self.d())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// The standardized generating mixture (DGMM only).
    pub fn mixture(&self) -> Result<MixtureSpec> {
        if self.spec.kind != DatasetKind::Dgmm {
            return Err(Error::Config(format!("{} has no Gaussian-mixture law", self.spec.kind)));
        }
        raw_dgmm_mixture(&self.spec, &self.dgmm_means)?.affine_standardize(&self.shift, &self.scale)
    }
}

pub fn sample_data<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>> {
    Ok(Dataset::new(spec.clone())?.sample(rng, n))
}

pub fn dgmm_mixture_spec(spec: &DatasetSpec) -> Result<MixtureSpec> {
    if spec.kind != DatasetKind::Dgmm {
        return Err(Error::Config(format!("{} has no Gaussian-mixture law", spec.kind)));
    }
    Dataset::new(spec.clone())?.mixture()
}

fn dgmm_layout(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng: ChaCha8Rng = stream_rng(spec.seed, Stream::Layout);
    (0..spec.modes())
        .map(|_| {
            (0..spec.d)
                .map(|_| rng.random_range(-DGMM_MEAN_BOX..=DGMM_MEAN_BOX))
                .collect()
        })
        .collect()
}

fn raw_dgmm_mixture(spec: &DatasetSpec, means: &[Vec<f64>]) -> Result<MixtureSpec> {
    let m = means.len();
    let mut weights = vec![1.0 / m as f64; m];
    // Keep the weights summing to one exactly.
    let head: f64 = weights[..m - 1].iter().sum();
    weights[m - 1] = 1.0 - head;
    MixtureSpec::new(
        weights,
        means.to_vec(),
        (0..m).map(|_| Covariance::isotropic(spec.d, DGMM_VARIANCE)).collect(),
    )
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn raw_toy_point<R: Rng + ?Sized>(kind: DatasetKind, noise_scale: f64, rng: &mut R) -> [f64; 2] {
    let (mut p, noise) = match kind {
        DatasetKind::Checkerboard => {
            let w = CHECKERBOARD_HALF_WIDTH;
            let x: f64 = rng.random_range(-w..w);
            let column = (x.floor() as i64).rem_euclid(2) as f64;
            let cell = 2.0 * rng.random_range(0..2) as f64;
            let y = rng.random::<f64>() - cell + column;
            ([x, y], CHECKERBOARD_NOISE)
        }
        DatasetKind::EightGaussians => {
            let k = rng.random_range(0..8) as f64;
            let a = k * PI / 4.0;
            let r = EIGHT_GAUSSIANS_RADIUS;
            ([r * a.cos(), r * a.sin()], EIGHT_GAUSSIANS_NOISE)
        }
        DatasetKind::TwoMoons => {
            let th = rng.random::<f64>() * PI;
            let p = if rng.random::<bool>() {
                [th.cos(), th.sin()]
            } else {
                [1.0 - th.cos(), 0.5 - th.sin()]
            };
            (p, TWO_MOONS_NOISE)
        }
        DatasetKind::SwissRoll => {
            let (a, b) = SWISS_ROLL_RANGE;
            let s = rng.random_range(a..b);
            let c = SWISS_ROLL_SCALE;
            ([c * s * s.cos(), c * s * s.sin()], SWISS_ROLL_NOISE * SWISS_ROLL_SCALE)
        }
        DatasetKind::TwoSpirals => {
            let s = TWO_SPIRALS_TURN * rng.random::<f64>().sqrt();
            let c = if rng.random::<bool>() { TWO_SPIRALS_SCALE } else { -TWO_SPIRALS_SCALE };
            ([-c * s * s.cos(), c * s * s.sin()], TWO_SPIRALS_NOISE)
        }
        DatasetKind::Pinwheel => {
            let k = rng.random_range(0..PINWHEEL_BLADES) as f64;
            let radial = 1.0 + PINWHEEL_RADIAL_STD * noise_scale * gauss(rng);
            let tangential = PINWHEEL_TANGENTIAL_STD * noise_scale * gauss(rng);
            let a = 2.0 * PI * k / PINWHEEL_BLADES as f64 + PINWHEEL_RATE * radial.exp();
            let (sa, ca) = a.sin_cos();
            let s = PINWHEEL_SCALE;
            ([s * (radial * ca - tangential * sa), s * (radial * sa + tangential * ca)], 0.0)
        }
        DatasetKind::Dgmm => unreachable!("dgmm is not a toy"),
    };
    let sd = noise * noise_scale;
    if sd > 0.0 {
        p[0] += sd * gauss(rng);
        p[1] += sd * gauss(rng);
    }
    p
}

/// Per-axis mean and variance of a toy law.
fn toy_moments(kind: DatasetKind, noise_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let (mean, var, noise) = match kind {
        DatasetKind::Checkerboard => {
            // Both coordinates are marginally U(−2, 2).
            let w = CHECKERBOARD_HALF_WIDTH;
            ([0.0, 0.0], [w * w / 3.0; 2], CHECKERBOARD_NOISE)
        }
        DatasetKind::EightGaussians => {
            let r = EIGHT_GAUSSIANS_RADIUS;
            ([0.0, 0.0], [r * r / 2.0; 2], EIGHT_GAUSSIANS_NOISE)
        }
        DatasetKind::TwoMoons => {
            // θ ~ U(0, π): E cos = 0, E sin = 2/π, E cos² = E sin² = 1/2.
            let my = 0.25;
            let ey2 = 0.625 - 1.0 / PI;
            ([0.5, my], [0.75, ey2 - my * my], TWO_MOONS_NOISE)
        }
        DatasetKind::SwissRoll => {
            let (a, b) = SWISS_ROLL_RANGE;
            let c = SWISS_ROLL_SCALE;
            let (m, v) = curve_moments(a, b, |_| 1.0 / (b - a), |s| [c * s * s.cos(), c * s * s.sin()]);
            ([m[0], m[1]], [v[0], v[1]], SWISS_ROLL_NOISE * SWISS_ROLL_SCALE)
        }
        DatasetKind::TwoSpirals => {
            // s = T·sqrt(U) has density 2s/T². The mirrored arm zeroes the
            // mean and shares the second moment.
            let tt = TWO_SPIRALS_TURN;
            let c = TWO_SPIRALS_SCALE;
            let (m, v) = curve_moments(0.0, tt, |s| 2.0 * s / (tt * tt), |s| [c * s * s.cos(), c * s * s.sin()]);
            ([0.0, 0.0], [v[0] + m[0] * m[0], v[1] + m[1] * m[1]], TWO_SPIRALS_NOISE)
        }
        DatasetKind::Pinwheel => {
            // Five-fold symmetry: zero mean, isotropic covariance with
            // E‖x‖²/2 = s²(E[radial²] + E[tangential²])/2.
            let sr = PINWHEEL_RADIAL_STD * noise_scale;
            let st = PINWHEEL_TANGENTIAL_STD * noise_scale;
            let s = PINWHEEL_SCALE;
            let v = s * s * (1.0 + sr * sr + st * st) / 2.0;
            ([0.0, 0.0], [v, v], 0.0)
        }
        DatasetKind::Dgmm => unreachable!("dgmm is not a toy"),
    };
    let nv = (noise * noise_scale).powi(2);
    (mean.to_vec(), var.iter().map(|v| v + nv).collect())
}

/// Mean and variance per axis of `f(s)` under density `w` on `[a, b]`,
/// by composite Simpson quadrature.
fn curve_moments(
    a: f64,
    b: f64,
    w: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> [f64; 2],
) -> (Vec<f64>, Vec<f64>) {
    const N: usize = 20_000;
    let h = (b - a) / N as f64;
    let mut m1 = [0.0; 2];
    let mut m2 = [0.0; 2];
    for i in 0..=N {
        let s = a + h * i as f64;
        let coef = if i == 0 || i == N {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let weight = coef * w(s) * h / 3.0;
        let p = f(s);
        for k in 0..2 {
            m1[k] += weight * p[k];
            m2[k] += weight * p[k] * p[k];
        }
    }
    (m1.to_vec(), (0..2).map(|k| m2[k] - m1[k] * m1[k]).collect())
}

/// One draw of the linear interpolant.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub r: f64,
    pub x_t: Vec<f64>,
    pub v_cond: Vec<f64>,
}

impl InterpolantSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64, r: f64) -> Self {
        let x_t = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let v_cond = x0.iter().zip(&x1).map(|(a, b)| b - a).collect();
        Self {
            x0,
            x1,
            t,
            r,
            x_t,
            v_cond,
        }
    }
}

/// A batch of interpolant draws in structure-of-arrays layout.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantBatch {
    d: usize,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub x_t: Vec<f64>,
    pub v_cond: Vec<f64>,
}

impl InterpolantBatch {
    /// Builds the batch from endpoint rows (`n × d`) and times.
    pub fn from_parts(d: usize, x0: Vec<f64>, x1: Vec<f64>, t: Vec<f64>, r: Vec<f64>) -> Self {
        let n = t.len();
        assert_eq!(x0.len(), n * d);
        assert_eq!(x1.len(), n * d);
        assert_eq!(r.len(), n);
        let mut x_t = Vec::with_capacity(n * d);
        let mut v_cond = Vec::with_capacity(n * d);
        for i in 0..n {
            let ti = t[i];
            for k in i * d..(i + 1) * d {
                x_t.push((1.0 - ti) * x0[k] + ti * x1[k]);
                v_cond.push(x1[k] - x0[k]);
            }
        }
        Self {
            d,
            x0,
            x1,
            t,
            r,
            x_t,
            v_cond,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row<'a>(&self, field: &'a [f64], i: usize) -> &'a [f64] {
        &field[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize) -> InterpolantSample {
        let s = i * self.d..(i + 1) * self.d;
        InterpolantSample {
            x0: self.x0[s.clone()].to_vec(),
            x1: self.x1[s.clone()].to_vec(),
            t: self.t[i],
            r: self.r[i],
            x_t: self.x_t[s.clone()].to_vec(),
            v_cond: self.v_cond[s].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = InterpolantSample> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// `(r, t)` as the sorted pair of two uniforms; with probability `overlap`
/// the pair collapses to `r = t`.
pub fn sample_times<R: Rng + ?Sized>(rng: &mut R, overlap: f64) -> (f64, f64) {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let u: f64 = rng.random();
    let (r, t) = if a <= b { (a, b) } else { (b, a) };
    if u < overlap {
        (t, t)
    } else {
        (r, t)
    }
}

/// Draws `n` interpolant tuples with independent data, noise and time streams.
pub fn sample_interpolant<R1, R2, R3>(
    data_rng: &mut R1,
    noise_rng: &mut R2,
    time_rng: &mut R3,
    source: &Dataset,
    n: usize,
    overlap: f64,
) -> InterpolantBatch
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
    R3: Rng + ?Sized,
{
    let d = source.d();
    let x0 = source.sample_flat(data_rng, n);
    let x1: Vec<f64> = (0..n * d).map(|_| gauss(noise_rng)).collect();
    let (r, t): (Vec<f64>, Vec<f64>) = (0..n).map(|_| sample_times(time_rng, overlap)).unzip();
    InterpolantBatch::from_parts(d, x0, x1, t, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn toy_specs_force_2d() {
        let mut s = DatasetSpec::toy(DatasetKind::TwoMoons);
        s.d = 3;
        assert!(s.validate().is_err());
        let mut g = DatasetSpec::dgmm(4, 1);
        g.dgmm_modes = Some(0);
        assert!(g.validate().is_err());
    }

    #[test]
    fn parse_names() {
        for k in DatasetKind::TOYS {
            assert_eq!(k.name().parse::<DatasetKind>().unwrap(), k);
        }
        assert!("moons".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn empty_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_data(&DatasetSpec::toy(DatasetKind::Pinwheel), &mut rng, 0).unwrap().is_empty());
    }

    #[test]
    fn quadrature_of_uniform_square() {
        let (m, v) = curve_moments(0.0, 2.0, |_| 0.5, |s| [s, s * s]);
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_mode_dgmm_is_single_gaussian() {
        let mut s = DatasetSpec::dgmm(3, 9);
        s.dgmm_modes = Some(1);
        let mix = dgmm_mixture_spec(&s).unwrap();
        assert_eq!(mix.n_components(), 1);
        // Standardized: zero mean, unit variance.
        assert!(mix.mean(0).iter().all(|v| v.abs() < 1e-12));
        let c = mix.covariance(0).to_matrix();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dgmm_weights_uniform() {
        let mix = dgmm_mixture_spec(&DatasetSpec::dgmm(4, 2)).unwrap();
        assert_eq!(mix.n_components(), 8);
        assert!(mix.weights().iter().all(|w| (w - 0.125).abs() < 1e-15));
    }

    #[test]
    fn mixture_rejected_for_toys() {
        assert!(dgmm_mixture_spec(&DatasetSpec::toy(DatasetKind::Checkerboard)).is_err());
    }

    #[test]
    fn overlap_one_collapses_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (r, t) = sample_times(&mut rng, 1.0);
            assert_eq!(r, t);
        }
    }

    #[test]
    fn interpolant_fields_consistent() {
        let ds = Dataset::new(DatasetSpec::toy(DatasetKind::SwissRoll)).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let mut c = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_interpolant(&mut a, &mut b, &mut c, &ds, 64, 0.0);
        for s in batch.iter() {
            assert!(s.r <= s.t);
            let re = InterpolantSample::new(s.x0.clone(), s.x1.clone(), s.t, s.r);
            assert_eq!(re, s);
        }
    }
}
