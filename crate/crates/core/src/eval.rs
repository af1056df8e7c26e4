//! Sliced Wasserstein distances between equal-size point sets.
//!
//! Directions are normalized standard Gaussians drawn from a seeded
//! generator, so every call with the same `projection_seed` and dimension
//! sees the same projection set. SW₁ and SW₂ computed together share it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::net::MlpModel;
use crate::rng::{step_rng, Stream};
use crate::trainer::one_step_sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwConfig {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_projections")]
    pub n_projections: usize,
    #[serde(default)]
    pub projection_seed: u64,
    /// Order of the per-projection distance, 1 or 2.
    #[serde(default = "default_order")]
    pub p: u8,
}

fn default_samples() -> usize {
    4096
}

fn default_projections() -> usize {
    500
}

fn default_order() -> u8 {
    1
}

impl Default for SwConfig {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            n_projections: default_projections(),
            projection_seed: 0,
            p: default_order(),
        }
    }
}

impl SwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_projections == 0 {
            return Err(Error::Config("sliced Wasserstein counts must be >= 1".into()));
        }
        if !matches!(self.p, 1 | 2) {
            return Err(Error::Config(format!("sliced Wasserstein order {} not in {{1, 2}}", self.p)));
        }
        Ok(())
    }
}

/// Unit directions, `n × d` row-major.
pub fn projection_directions(d: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        loop {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.extend(z.iter().map(|v| v / norm));
                break;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwPair {
    pub sw1: f64,
    pub sw2: f64,
}

fn flatten(pts: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let d = pts.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(pts.len() * d);
    for p in pts {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
        flat.extend_from_slice(p);
    }
    Ok((flat, d))
}

/// SW₁ and SW₂ over one shared projection set, on flat `n × d` inputs.
pub fn sliced_wasserstein_flat(a: &[f64], b: &[f64], d: usize, cfg: &SwConfig) -> Result<SwPair> {
    cfg.validate()?;
    if d == 0 || a.len() % d != 0 || b.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: a.len() % d.max(1) });
    }
    let n = a.len() / d;
    if b.len() / d != n {
        return Err(Error::Config(format!("point sets differ in size: {} vs {}", n, b.len() / d)));
    }
    if n == 0 {
        return Err(Error::Config("empty point sets".into()));
    }
    let dirs = projection_directions(d, cfg.n_projections, cfg.projection_seed);
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    let (mut s1, mut s2) = (0.0, 0.0);
    for theta in dirs.chunks_exact(d) {
        project(a, theta, &mut pa);
        project(b, theta, &mut pb);
        pa.sort_unstable_by(f64::total_cmp);
        pb.sort_unstable_by(f64::total_cmp);
        let (mut w1, mut w2) = (0.0, 0.0);
        for (x, y) in pa.iter().zip(&pb) {
            let diff = (x - y).abs();
            w1 += diff;
            w2 += diff * diff;
        }
        s1 += w1 / n as f64;
        s2 += (w2 / n as f64).sqrt();
    }
    let k = cfg.n_projections as f64;
    Ok(SwPair { sw1: s1 / k, sw2: s2 / k })
}

fn project(pts: &[f64], theta: &[f64], out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(pts.chunks_exact(theta.len())) {
        *o = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    }
}

/// Both orders on the same projections.
pub fn sliced_wasserstein_pair(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &SwConfig) -> Result<SwPair> {
    let (fa, da) = flatten(a)?;
    let (fb, db) = flatten(b)?;
    if da != db {
        return Err(Error::DimensionMismatch { expected: da, got: db });
    }
    sliced_wasserstein_flat(&fa, &fb, da, cfg)
}

/// SW of order `cfg.p`.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &SwConfig) -> Result<f64> {
    let pair = sliced_wasserstein_pair(a, b, cfg)?;
    Ok(if cfg.p == 1 { pair.sw1 } else { pair.sw2 })
}

/// One-step samples against fresh data for one evaluation seed.
pub fn evaluate_model_once(model: &MlpModel, data: &Dataset, cfg: &SwConfig, seed: u64) -> Result<SwPair> {
    if model.d() != data.d() {
        return Err(Error::DimensionMismatch { expected: data.d(), got: model.d() });
    }
    let generated = one_step_sample(model, &mut step_rng(seed, Stream::Eval, 0), cfg.n_samples)?;
    let reference = data.sample_flat(&mut step_rng(seed, Stream::Eval, 1), cfg.n_samples);
    let flat: Vec<f64> = generated.into_iter().flatten().collect();
    sliced_wasserstein_flat(&flat, &reference, data.d(), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sw1_mean: f64,
    pub sw1_sem: f64,
    pub sw2_mean: f64,
    pub sw2_sem: f64,
    pub per_seed: Vec<(u64, SwPair)>,
}

/// Mean and standard error over evaluation seeds.
pub fn evaluate_checkpoint(model: &MlpModel, dataset: &DatasetSpec, cfg: &SwConfig, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluate_checkpoint needs at least one seed".into()));
    }
    let data = Dataset::new(dataset.clone())?;
    let per_seed = seeds
        .iter()
        .map(|&s| evaluate_model_once(model, &data, cfg, s).map(|p| (s, p)))
        .collect::<Result<Vec<_>>>()?;
    let (sw1_mean, sw1_sem) = mean_sem(&per_seed.iter().map(|(_, p)| p.sw1).collect::<Vec<_>>());
    let (sw2_mean, sw2_sem) = mean_sem(&per_seed.iter().map(|(_, p)| p.sw2).collect::<Vec<_>>());
    Ok(EvalReport {
        sw1_mean,
        sw1_sem,
        sw2_mean,
        sw2_sem,
        per_seed,
    })
}

/// Mean and standard error of the mean; the SEM of one value is 0.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, (i * i) as f64 * 0.01]).collect();
        let p = sliced_wasserstein_pair(&a, &a, &SwConfig::default()).unwrap();
        assert_eq!(p.sw1, 0.0);
        assert_eq!(p.sw2, 0.0);
    }

    #[test]
    fn size_and_dimension_mismatch_error() {
        let a = vec![vec![0.0, 1.0]; 3];
        let b = vec![vec![0.0, 1.0]; 4];
        assert!(sliced_wasserstein(&a, &b, &SwConfig::default()).is_err());
        let c = vec![vec![0.0]; 3];
        assert!(sliced_wasserstein(&a, &c, &SwConfig::default()).is_err());
    }

    #[test]
    fn directions_are_unit() {
        let dirs = projection_directions(5, 20, 3);
        for row in dirs.chunks_exact(5) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sem_of_constant_is_zero() {
        assert_eq!(mean_sem(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        assert_eq!(mean_sem(&[1.5]), (1.5, 0.0));
    }
}
