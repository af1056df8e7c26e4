//! Measurement instruments: gradient-variance traces, loss variance across
//! time, Jacobian scale κ, the optimal mixing coefficient, the
//! semi-gradient gap and the target/tangent bias asymmetry.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_interpolant, Dataset, InterpolantBatch, InterpolantSample};
use crate::error::{Error, Result};
use crate::gmm_oracle::{average_velocity, conditional_stats, marginal_velocity, sample_posterior_x0, MixtureSpec};
use crate::losses::{
    batch_loss_and_grad, batch_proxy, compound_prediction, fd_gradient, meanflow_loss, proxy_eval, BatchTerms,
    ProxyContext, ProxySource, TangentPolicy, FD_PARAM_LIMIT,
};
use crate::net::{Activation, Architecture, EmaState, MlpModel};
use crate::trainer::{Optimizer, OptimizerConfig};

// ---------------------------------------------------------------------------
// Gradient variance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradVarianceReport {
    pub k: usize,
    pub replica_norms: Vec<f64>,
    /// Sum over parameters of the unbiased across-replica variance.
    pub trace_cov: f64,
    pub tail_average: Option<f64>,
    pub mean_mf_loss: f64,
    pub mean_fm_loss: f64,
}

/// `Tr Cov` of a set of vectors with the `K − 1` divisor.
pub fn trace_covariance(vectors: &[Vec<f64>]) -> Result<f64> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::Config("trace_covariance needs at least two vectors".into()));
    }
    let p = vectors[0].len();
    let mut total = 0.0;
    for j in 0..p {
        let mean = vectors.iter().map(|g| g[j]).sum::<f64>() / k as f64;
        total += vectors.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>();
    }
    Ok(total / (k - 1) as f64)
}

/// Trace of the covariance of `k` replica vectors produced by `replica`.
pub fn replica_trace<F>(k: usize, mut replica: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if k < 2 {
        return Err(Error::Config("need at least two replicas".into()));
    }
    let grads = (0..k).map(&mut replica).collect::<Result<Vec<_>>>()?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { sample: 0 });
    }
    let norms = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok((trace_covariance(&grads)?, norms))
}

/// `K` independent batches of the MF-loss stop-gradient gradient.
///
/// The anchor term is left out of the gradient (the measured quantity is the
/// variance of the MeanFlow term); its mean loss is still reported.
#[allow(clippy::too_many_arguments)]
pub fn grad_variance<R: Rng + ?Sized>(
    model: &MlpModel,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    data: &Dataset,
    k: usize,
    batch_size: usize,
    overlap: f64,
    rng: &mut R,
) -> Result<GradVarianceReport> {
    let mf_policy = TangentPolicy {
        anchor_lambda: 0.0,
        ..policy.clone()
    };
    let mut mf_sum = 0.0;
    let mut fm_sum = 0.0;
    let (trace_cov, replica_norms) = replica_trace(k, |_| {
        let mut data_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut time_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut anchor_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let batch = sample_interpolant(&mut data_rng, &mut noise_rng, &mut time_rng, data, batch_size, overlap);
        let proxy = batch_proxy(model, policy, ctx, &batch)?;
        let mut grad = vec![0.0; model.n_params()];
        let mf = batch_loss_and_grad(
            model,
            &batch,
            &mf_policy,
            BatchTerms {
                deltas: &[],
                proxy: proxy.as_deref(),
            },
            Some(&mut grad),
        )?;
        mf_sum += mf.mf_loss;
        if policy.anchor_lambda > 0.0 {
            let [lo, hi] = policy.anchor_delta;
            let deltas: Vec<f64> = (0..batch_size).map(|_| lo + (hi - lo) * anchor_rng.random::<f64>()).collect();
            let full = batch_loss_and_grad(
                model,
                &batch,
                policy,
                BatchTerms {
                    deltas: &deltas,
                    proxy: proxy.as_deref(),
                },
                None,
            )?;
            fm_sum += full.fm_loss;
        }
        Ok(grad)
    })?;
    Ok(GradVarianceReport {
        k,
        replica_norms,
        trace_cov,
        tail_average: None,
        mean_mf_loss: mf_sum / k as f64,
        mean_fm_loss: fm_sum / k as f64,
    })
}

// ---------------------------------------------------------------------------
// Loss variance across t

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVarianceRow {
    pub t: f64,
    pub r: f64,
    pub n: usize,
    pub var_stochastic: f64,
    pub var_deterministic: f64,
    /// Fewer than 30 samples: treat the variances as rough.
    pub wide_ci: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossVarianceTable {
    pub rows: Vec<LossVarianceRow>,
    pub skipped: Vec<(f64, String)>,
}

pub const LOSS_VARIANCE_HEADER: &str = "t,r,n,var_stochastic,var_deterministic,wide_ci";

impl LossVarianceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSS_VARIANCE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t, r.r, r.n, r.var_stochastic, r.var_deterministic, r.wide_ci
            ));
        }
        s
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Per-sample MF-loss variance at fixed `(r, t) = (t − gap, t)` under two
/// tangent policies, on the same `(x₀, x₁)` draws.
#[allow(clippy::too_many_arguments)]
pub fn loss_variance_vs_t<R: Rng + ?Sized>(
    model: &MlpModel,
    stochastic: &TangentPolicy,
    deterministic: &TangentPolicy,
    ctx: ProxyContext<'_>,
    data: &Dataset,
    t_grid: &[f64],
    gap: f64,
    n: usize,
    rng: &mut R,
) -> Result<LossVarianceTable> {
    if n < 2 {
        return Err(Error::Config("loss variance needs n >= 2".into()));
    }
    let d = data.d();
    let mut table = LossVarianceTable::default();
    for &t in t_grid {
        let r = t - gap;
        if r < 0.0 {
            table.skipped.push((t, format!("t - gap = {r} < 0")));
            continue;
        }
        let x0 = data.sample_flat(rng, n);
        let x1: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        let batch = InterpolantBatch::from_parts(d, x0, x1, vec![t; n], vec![r; n]);
        let mut ls = Vec::with_capacity(n);
        let mut ld = Vec::with_capacity(n);
        for s in batch.iter() {
            ls.push(meanflow_loss(model, &s, stochastic, ctx, 0.0)?.mf_loss);
            ld.push(meanflow_loss(model, &s, deterministic, ctx, 0.0)?.mf_loss);
        }
        table.rows.push(LossVarianceRow {
            t,
            r,
            n,
            var_stochastic: sample_variance(&ls),
            var_deterministic: sample_variance(&ld),
            wide_ci: n < 30,
        });
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// κ

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEstimate {
    pub kappa: f64,
    /// Standard error of the probe average (0 in dense mode).
    pub se: f64,
}

/// Hutchinson estimate of `Tr((t − r) ∂ₓu) / d − 1` with Rademacher probes.
pub fn estimate_kappa<R: Rng + ?Sized>(
    model: &MlpModel,
    x: &[f64],
    r: f64,
    t: f64,
    probes: usize,
    rng: &mut R,
) -> Result<KappaEstimate> {
    if probes == 0 {
        return Err(Error::Config("estimate_kappa needs probes >= 1".into()));
    }
    let d = model.d();
    let mut vals = Vec::with_capacity(probes);
    let mut tangent = vec![0.0; d + 2];
    for _ in 0..probes {
        for z in tangent.iter_mut().take(d) {
            *z = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let jv = model.jvp(x, r, t, &tangent)?;
        let quad: f64 = (0..d).map(|i| tangent[i] * jv.directional[i]).sum();
        vals.push((t - r) * quad / d as f64);
    }
    let mean = vals.iter().sum::<f64>() / probes as f64;
    let se = if probes > 1 { (sample_variance(&vals) / probes as f64).sqrt() } else { f64::NAN };
    Ok(KappaEstimate { kappa: mean - 1.0, se })
}

/// Exact `Tr(J) / d` from the dense Jacobian.
pub fn kappa_dense(model: &MlpModel, x: &[f64], r: f64, t: f64) -> Result<f64> {
    let jx = model.spatial_jacobian(x, r, t)?;
    Ok((t - r) * jx.trace() / model.d() as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Optimal mixing coefficient

/// `κ/(κ+1) · σ²d/(σ²d + ‖b‖²)`, with κ ≤ 0 clipped to the unbiased corner.
pub fn beta_star_scalar(kappa: f64, sigma2d: f64, bias_sq: f64) -> f64 {
    if !(kappa > 0.0) {
        return 0.0;
    }
    let denom = sigma2d + bias_sq;
    if denom <= 0.0 {
        return 0.0;
    }
    kappa / (kappa + 1.0) * sigma2d / denom
}

/// Coefficients of the gradient MSE `M(β) = α₀ − 2βα₁ + β²α₂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub alpha0: f64,
    pub alpha1: f64,
    /// Includes the bias contribution `bias_term`.
    pub alpha2: f64,
    /// `Tr(G A b bᵀ Aᵀ)`.
    pub bias_term: f64,
}

impl Alphas {
    pub fn add(&mut self, o: &Alphas) {
        self.alpha0 += o.alpha0;
        self.alpha1 += o.alpha1;
        self.alpha2 += o.alpha2;
        self.bias_term += o.bias_term;
    }

    pub fn m(&self, beta: f64) -> f64 {
        self.alpha0 - 2.0 * beta * self.alpha1 + beta * beta * self.alpha2
    }

    /// `α₁/α₂`, unclipped.
    pub fn stationary_point(&self) -> Result<f64> {
        if !(self.alpha2 > 0.0) {
            return Err(Error::DegenerateQuadratic(self.alpha2));
        }
        Ok(self.alpha1 / self.alpha2)
    }

    /// Minimizer over `[0, 1]`.
    pub fn minimizer(&self) -> Result<f64> {
        Ok(self.stationary_point()?.clamp(0.0, 1.0))
    }

    /// `Tr(JΣAᵀ)/Tr(AΣAᵀ)`, the minimizer with the bias term dropped, unclipped.
    pub fn no_bias_ratio(&self) -> Result<f64> {
        let den = self.alpha2 - self.bias_term;
        if !(den > 0.0) {
            return Err(Error::DegenerateQuadratic(den));
        }
        Ok(self.alpha1 / den)
    }
}

/// α-coefficients for one point. `a = J + I` is passed separately so an
/// exactly-zero `A` stays exactly zero.
pub fn alpha_coefficients(
    j: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    b: &DVector<f64>,
    g: Option<&DMatrix<f64>>,
) -> Alphas {
    let jst = j * sigma;
    let ast = a * sigma;
    let ab = a * b;
    let tr = |m: DMatrix<f64>| match g {
        Some(g) => (g * m).trace(),
        None => m.trace(),
    };
    let bias_term = match g {
        Some(g) => (ab.transpose() * g * &ab)[(0, 0)],
        None => ab.norm_squared(),
    };
    Alphas {
        alpha0: tr(&jst * j.transpose()),
        alpha1: tr(&jst * a.transpose()),
        alpha2: tr(&ast * a.transpose()) + bias_term,
        bias_term,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub x: Vec<f64>,
    pub r: f64,
    pub t: f64,
}

/// `n_per_t` interpolant states per `t` with `r = max(t − gap, 0)`.
pub fn probe_points<R: Rng + ?Sized>(mix: &MixtureSpec, t_grid: &[f64], gap: f64, n_per_t: usize, rng: &mut R) -> Vec<ProbePoint> {
    let d = mix.d();
    let mut out = Vec::with_capacity(t_grid.len() * n_per_t);
    for &t in t_grid {
        for x0 in mix.sample(rng, n_per_t) {
            let x = x0
                .iter()
                .map(|a| {
                    let z: f64 = StandardNormal.sample(rng);
                    (1.0 - t) * a + t * z
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(x.len(), d);
            out.push(ProbePoint {
                x,
                r: (t - gap).max(0.0),
                t,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum BiasSource {
    Zero,
    Constant(Vec<f64>),
    /// `b = proxy(x, t) − v(x, t)`.
    Proxy(ProxySource),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMode {
    Dense,
    /// `J ≈ κ̂ I` from Hutchinson probes.
    Scalar { probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovarianceMode {
    Analytic,
    /// Sample covariance of `n_v` posterior velocity draws.
    Empirical { n_v: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaProbeOptions {
    pub jacobian: JacobianMode,
    pub covariance: CovarianceMode,
    /// Use `G = ∂_θu ∂_θuᵀ` instead of `G = I`.
    pub exact_g: bool,
}

impl Default for BetaProbeOptions {
    fn default() -> Self {
        Self {
            jacobian: JacobianMode::Dense,
            covariance: CovarianceMode::Analytic,
            exact_g: false,
        }
    }
}

/// Pooled coefficients for one `t` slice of the probe grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TSlice {
    pub t: f64,
    pub r: f64,
    pub points: usize,
    pub alphas: Alphas,
    pub beta_star_matrix: Option<f64>,
    pub beta_star_no_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimateReport {
    pub kappa_hat: f64,
    pub sigma2d_hat: f64,
    pub bias_sq_hat: f64,
    pub beta_star_scalar: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha2_no_bias: f64,
    pub beta_star_matrix: f64,
    pub beta_star_matrix_unclipped: f64,
    pub beta_star_no_bias: f64,
    pub probe_points: Vec<(f64, f64)>,
    pub per_t: Vec<TSlice>,
}

/// Per-point ingredients of the β* estimators.
#[derive(Clone, Debug)]
pub struct PointTerms {
    pub j: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub g: Option<DMatrix<f64>>,
}

pub fn point_terms<R: Rng + ?Sized>(
    model: &MlpModel,
    mix: &MixtureSpec,
    p: &ProbePoint,
    bias: &BiasSource,
    ctx: ProxyContext<'_>,
    opts: &BetaProbeOptions,
    rng: &mut R,
) -> Result<PointTerms> {
    let d = model.d();
    let gap = p.t - p.r;
    let stats = conditional_stats(mix, &p.x, p.t)?;
    let a = match opts.jacobian {
        JacobianMode::Dense => model.spatial_jacobian(&p.x, p.r, p.t)? * gap,
        JacobianMode::Scalar { probes } => {
            let k = estimate_kappa(model, &p.x, p.r, p.t, probes, rng)?;
            DMatrix::identity(d, d) * (k.kappa + 1.0)
        }
    };
    let j = &a - DMatrix::<f64>::identity(d, d);
    let sigma = match opts.covariance {
        CovarianceMode::Analytic => stats.velocity_cov.clone(),
        CovarianceMode::Empirical { n_v } => {
            if n_v < 2 {
                return Err(Error::Config("empirical covariance needs n_v >= 2".into()));
            }
            let draws = sample_posterior_x0(mix, &p.x, p.t, rng, n_v)?;
            let vs: Vec<DVector<f64>> = draws
                .iter()
                .map(|x0| DVector::from_iterator(d, (0..d).map(|i| (p.x[i] - x0[i]) / p.t)))
                .collect();
            let mean = vs.iter().fold(DVector::zeros(d), |acc, v| acc + v) / n_v as f64;
            vs.iter().fold(DMatrix::zeros(d, d), |acc, v| {
                let c = v - &mean;
                acc + &c * c.transpose()
            }) / (n_v - 1) as f64
        }
    };
    let v = DVector::from_vec(stats.marginal_velocity.clone());
    let bias = match bias {
        BiasSource::Zero => DVector::zeros(d),
        BiasSource::Constant(b) => {
            if b.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: b.len() });
            }
            DVector::from_vec(b.clone())
        }
        BiasSource::Proxy(src) => {
            let policy = TangentPolicy {
                beta: 1.0,
                proxy: *src,
                anchor_lambda: 0.0,
                anchor_delta: [0.0, 0.0],
            };
            let ctx = ProxyContext {
                oracle: ctx.oracle.or(Some(mix)),
                ..ctx
            };
            let vhat = proxy_eval(model, &policy, ctx, &p.x, p.t)?.ok_or(Error::MissingProxy { what: "bias" })?;
            DVector::from_vec(vhat) - &v
        }
    };
    let g = if opts.exact_g {
        let pj = model.param_jacobian(&p.x, p.r, p.t)?;
        Some(&pj * pj.transpose())
    } else {
        None
    };
    Ok(PointTerms { j, a, sigma, bias, g })
}

/// Pooled α-coefficients and the β* estimators over a set of probe points.
/// Pooling sums numerators and denominators across points.
pub fn estimate_beta_star<R: Rng + ?Sized>(
    model: &MlpModel,
    mix: &MixtureSpec,
    points: &[ProbePoint],
    bias: &BiasSource,
    ctx: ProxyContext<'_>,
    opts: &BetaProbeOptions,
    rng: &mut R,
) -> Result<BetaEstimateReport> {
    if points.is_empty() {
        return Err(Error::Config("estimate_beta_star needs probe points".into()));
    }
    if mix.d() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: mix.d() });
    }
    let d = model.d() as f64;
    let mut pooled = Alphas::default();
    let mut slices: Vec<TSlice> = Vec::new();
    let (mut kappa_sum, mut sigma_sum, mut bias_sum) = (0.0, 0.0, 0.0);
    for p in points {
        let pt = point_terms(model, mix, p, bias, ctx, opts, rng)?;
        let al = alpha_coefficients(&pt.j, &pt.a, &pt.sigma, &pt.bias, pt.g.as_ref());
        pooled.add(&al);
        kappa_sum += pt.j.trace() / d;
        sigma_sum += pt.sigma.trace();
        bias_sum += pt.bias.norm_squared();
        match slices.iter_mut().find(|s| s.t == p.t && s.r == p.r) {
            Some(s) => {
                s.alphas.add(&al);
                s.points += 1;
            }
            None => slices.push(TSlice {
                t: p.t,
                r: p.r,
                points: 1,
                alphas: al,
                beta_star_matrix: None,
                beta_star_no_bias: None,
            }),
        }
    }
    for s in &mut slices {
        s.beta_star_matrix = s.alphas.minimizer().ok();
        s.beta_star_no_bias = s.alphas.no_bias_ratio().ok().map(|b| b.clamp(0.0, 1.0));
    }
    let n = points.len() as f64;
    let kappa_hat = kappa_sum / n;
    let sigma2d_hat = sigma_sum / n;
    let bias_sq_hat = bias_sum / n;
    let unclipped = pooled.stationary_point()?;
    Ok(BetaEstimateReport {
        kappa_hat,
        sigma2d_hat,
        bias_sq_hat,
        beta_star_scalar: beta_star_scalar(kappa_hat, sigma2d_hat, bias_sq_hat),
        alpha0: pooled.alpha0,
        alpha1: pooled.alpha1,
        alpha2: pooled.alpha2,
        alpha2_no_bias: pooled.alpha2 - pooled.bias_term,
        beta_star_matrix: unclipped.clamp(0.0, 1.0),
        beta_star_matrix_unclipped: unclipped,
        beta_star_no_bias: pooled.no_bias_ratio()?.clamp(0.0, 1.0),
        probe_points: points.iter().map(|p| (p.t, p.r)).collect(),
        per_t: slices,
    })
}

/// Exact trace of the conditional covariance of the β = 0 per-sample
/// gradient given `x_t`: `4 Tr(J Σ Jᵀ G)` with `G = ∂_θu ∂_θuᵀ`.
pub fn conditional_grad_cov_trace(model: &MlpModel, mix: &MixtureSpec, x: &[f64], r: f64, t: f64) -> Result<f64> {
    let d = model.d();
    let stats = conditional_stats(mix, x, t)?;
    let j = model.spatial_jacobian(x, r, t)? * (t - r) - DMatrix::<f64>::identity(d, d);
    let pj = model.param_jacobian(x, r, t)?;
    let g = &pj * pj.transpose();
    Ok(4.0 * (&j * &stats.velocity_cov * j.transpose() * g).trace())
}

// ---------------------------------------------------------------------------
// Semi-gradient gap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub full_grad_fd: Vec<f64>,
    pub semi_grad: Vec<f64>,
    pub mean_field_diff: Vec<f64>,
    pub variance_diff: Vec<f64>,
    pub closure_residual_norm: f64,
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl GapReport {
    pub fn norms(&self) -> (f64, f64, f64, f64) {
        (
            l2(&self.full_grad_fd),
            l2(&self.semi_grad),
            l2(&self.mean_field_diff),
            l2(&self.variance_diff),
        )
    }
}

struct PointOracle {
    v: Vec<f64>,
    sigma: DMatrix<f64>,
}

fn point_oracles(mix: &MixtureSpec, points: &[ProbePoint]) -> Result<Vec<PointOracle>> {
    points
        .iter()
        .map(|p| {
            let s = conditional_stats(mix, &p.x, p.t)?;
            Ok(PointOracle {
                v: s.marginal_velocity,
                sigma: s.velocity_cov,
            })
        })
        .collect()
}

/// Mean over points of `‖r_θ‖²` and of `Tr(JΣJᵀ)`, with the directional
/// term evaluated at the model's own parameters.
fn conditional_loss_terms(model: &MlpModel, points: &[ProbePoint], oracles: &[PointOracle]) -> Result<(f64, f64)> {
    let d = model.d();
    let (mut res, mut var) = (0.0, 0.0);
    for (p, o) in points.iter().zip(oracles) {
        let c = compound_prediction(model, &p.x, p.r, p.t, &o.v)?;
        res += c.iter().zip(&o.v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let j = model.spatial_jacobian(&p.x, p.r, p.t)? * (p.t - p.r) - DMatrix::<f64>::identity(d, d);
        var += (&j * &o.sigma * j.transpose()).trace();
    }
    let n = points.len() as f64;
    Ok((res / n, var / n))
}

/// Analytic conditional loss `mean ‖r_θ‖² + Tr(JΣJᵀ)` over the points.
pub fn analytic_conditional_loss(model: &MlpModel, mix: &MixtureSpec, points: &[ProbePoint]) -> Result<(f64, f64)> {
    conditional_loss_terms(model, points, &point_oracles(mix, points)?)
}

fn semigrad_mean(model: &MlpModel, points: &[ProbePoint], oracles: &[PointOracle]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.n_params()];
    for (p, o) in points.iter().zip(oracles) {
        let c = compound_prediction(model, &p.x, p.r, p.t, &o.v)?;
        let seed: Vec<f64> = c.iter().zip(&o.v).map(|(a, b)| 2.0 * (a - b)).collect();
        for (acc, v) in g.iter_mut().zip(model.param_grad(&p.x, p.r, p.t, &seed)?) {
            *acc += v;
        }
    }
    let n = points.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Splits the full gradient of the analytic conditional loss into the
/// stop-gradient part, the mean-field difference and the variance-driven
/// difference. Each piece is computed independently, so the closure
/// residual measures finite-difference error.
pub fn semigradient_gap(model: &MlpModel, mix: &MixtureSpec, points: &[ProbePoint], h: f64) -> Result<GapReport> {
    let p = model.n_params();
    if p > FD_PARAM_LIMIT {
        return Err(Error::ParamGuard {
            params: p,
            limit: FD_PARAM_LIMIT,
        });
    }
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    if points.is_empty() {
        return Err(Error::Config("semigradient_gap needs probe points".into()));
    }
    let oracles = point_oracles(mix, points)?;
    let at = |theta: &[f64]| -> Result<(f64, f64)> {
        conditional_loss_terms(&model.with_params(theta.to_vec())?, points, &oracles)
    };
    let full_grad_fd = fd_gradient(model.params(), h, |th| at(th).map(|(a, b)| a + b))?;
    let res_grad = fd_gradient(model.params(), h, |th| at(th).map(|(a, _)| a))?;
    let variance_diff = fd_gradient(model.params(), h, |th| at(th).map(|(_, b)| b))?;
    let semi_grad = semigrad_mean(model, points, &oracles)?;
    let mean_field_diff: Vec<f64> = res_grad.iter().zip(&semi_grad).map(|(a, b)| a - b).collect();
    let closure: Vec<f64> = (0..p)
        .map(|k| full_grad_fd[k] - semi_grad[k] - mean_field_diff[k] - variance_diff[k])
        .collect();
    Ok(GapReport {
        closure_residual_norm: l2(&closure),
        full_grad_fd,
        semi_grad,
        mean_field_diff,
        variance_diff,
    })
}

/// Drives the mean residual `r^sg` toward zero at the probe points with Adam
/// on the stop-gradient gradient of `mean ‖r^sg‖²`.
pub fn fit_mean_field(model: &MlpModel, mix: &MixtureSpec, points: &[ProbePoint], steps: usize, lr: f64) -> Result<MlpModel> {
    let oracles = point_oracles(mix, points)?;
    let mut m = model.clone();
    let mut opt = Optimizer::new(OptimizerConfig::default(), lr, m.n_params());
    for _ in 0..steps {
        let g = semigrad_mean(&m, points, &oracles)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: 0 });
        }
        opt.apply(m.params_mut(), &g);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Target/tangent bias asymmetry

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPlacement {
    /// `v + b` replaces the tangent; the target stays `v_cond`.
    Tangent,
    /// `v + b` replaces the target; the tangent is the exact `v`.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub overlap: f64,
    pub ema_decay: f64,
    /// Probe states per probe time.
    pub probe_n: usize,
    pub probe_ts: Vec<f64>,
    /// Gap `t − r` of the off-diagonal measurement.
    pub gap: f64,
    pub rk4_steps: usize,
    /// Cosine learning-rate decay to zero over the run.
    pub cosine_decay: bool,
}

impl Default for AsymmetryConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_size: 256,
            lr: 1e-3,
            hidden: vec![64, 64],
            seed: 0,
            overlap: 0.5,
            ema_decay: 0.995,
            probe_n: 128,
            probe_ts: vec![0.2, 0.4, 0.6, 0.8],
            gap: 0.5,
            rk4_steps: 64,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryReport {
    pub bias_norm: f64,
    pub gap: f64,
    pub tangent_mode_error_at_boundary: f64,
    pub target_mode_error_at_boundary: f64,
    pub tangent_mode_error_at_gap: f64,
    pub target_mode_error_at_gap: f64,
}

/// `t ∼ U(0, 1)` and `r ∼ U(0, t)`, or `r = t` with probability `overlap`.
/// Uniform `t` keeps small times as well covered as large ones.
fn uniform_times<R: Rng + ?Sized>(rng: &mut R, overlap: f64) -> (f64, f64) {
    let t: f64 = rng.random();
    let s: f64 = rng.random();
    let u: f64 = rng.random();
    if u < overlap {
        (t, t)
    } else {
        (t * s, t)
    }
}

/// Trains a model with the biased proxy in one role; returns the EMA model.
pub fn train_biased(mix: &MixtureSpec, bias: &[f64], placement: BiasPlacement, cfg: &AsymmetryConfig) -> Result<MlpModel> {
    let d = mix.d();
    if bias.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: bias.len() });
    }
    let arch = Architecture::new(d, &cfg.hidden, Activation::Silu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(arch, crate::net::DEFAULT_INIT_GAIN, &mut rng);
    let mut ema = EmaState::new(model.params(), cfg.ema_decay)?;
    let mut opt = Optimizer::new(OptimizerConfig::default(), cfg.lr, model.n_params());
    let policy = TangentPolicy {
        beta: 1.0,
        proxy: ProxySource::AnalyticOracle,
        anchor_lambda: 0.0,
        anchor_delta: [0.0, 0.0],
    };
    let n = cfg.batch_size;
    let mut grad = vec![0.0; model.n_params()];
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            let frac = step as f64 / cfg.steps as f64;
            opt.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        let x0: Vec<f64> = mix.sample(&mut rng, n).into_iter().flatten().collect();
        let x1: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (r, t): (Vec<f64>, Vec<f64>) = (0..n).map(|_| uniform_times(&mut rng, cfg.overlap)).unzip();
        let mut batch = InterpolantBatch::from_parts(d, x0, x1, t, r);
        let mut v = Vec::with_capacity(n * d);
        for i in 0..n {
            v.extend(marginal_velocity(mix, batch.row(&batch.x_t, i), batch.t[i])?);
        }
        let biased: Vec<f64> = v.iter().enumerate().map(|(k, a)| a + bias[k % d]).collect();
        let proxy = match placement {
            BiasPlacement::Tangent => biased,
            BiasPlacement::Target => {
                batch.v_cond = biased;
                v
            }
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let terms = BatchTerms {
            deltas: &[],
            proxy: Some(&proxy),
        };
        batch_loss_and_grad(&model, &batch, &policy, terms, Some(&mut grad))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: 0 });
        }
        opt.apply(model.params_mut(), &grad);
        ema.update(model.params())?;
    }
    model.with_params(ema.shadow().to_vec())
}

/// Mean `‖u(x, t, t) − v(x, t)‖` and mean `‖u(x, t − gap, t) − u*(x, t − gap, t)‖`
/// over probe states drawn from the interpolant law.
pub fn boundary_and_gap_error(model: &MlpModel, mix: &MixtureSpec, cfg: &AsymmetryConfig) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let pts = probe_points(mix, &cfg.probe_ts, 0.0, cfg.probe_n, &mut rng);
    let mut boundary = 0.0;
    let mut gap_err = 0.0;
    let mut gap_count = 0usize;
    for p in &pts {
        let u = model.forward(&p.x, p.t, p.t)?;
        let v = marginal_velocity(mix, &p.x, p.t)?;
        boundary += l2(&u.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        let r = p.t - cfg.gap;
        if r >= 0.0 {
            let u = model.forward(&p.x, r, p.t)?;
            let truth = average_velocity(mix, &p.x, r, p.t, cfg.rk4_steps)?;
            gap_err += l2(&u.iter().zip(&truth).map(|(a, b)| a - b).collect::<Vec<_>>());
            gap_count += 1;
        }
    }
    let gap_mean = if gap_count > 0 { gap_err / gap_count as f64 } else { f64::NAN };
    Ok((boundary / pts.len() as f64, gap_mean))
}

/// Trains one model per placement of a constant-bias proxy and compares
/// their errors on the diagonal `r = t` and at gap `cfg.gap`.
pub fn bias_asymmetry_probe(mix: &MixtureSpec, bias: &[f64], cfg: &AsymmetryConfig) -> Result<AsymmetryReport> {
    let tangent = train_biased(mix, bias, BiasPlacement::Tangent, cfg)?;
    let target = train_biased(mix, bias, BiasPlacement::Target, cfg)?;
    let (tb, tg) = boundary_and_gap_error(&tangent, mix, cfg)?;
    let (gb, gg) = boundary_and_gap_error(&target, mix, cfg)?;
    Ok(AsymmetryReport {
        bias_norm: l2(bias),
        gap: cfg.gap,
        tangent_mode_error_at_boundary: tb,
        target_mode_error_at_boundary: gb,
        tangent_mode_error_at_gap: tg,
        target_mode_error_at_gap: gg,
    })
}

// ---------------------------------------------------------------------------
// Quadratic fit

/// Least-squares `c` in `Δ ≈ cβ²`: `Σβ²Δ / Σβ⁴`.
pub fn fit_quadratic_coefficient(points: &[(f64, f64)]) -> Result<f64> {
    let den: f64 = points.iter().map(|(b, _)| b.powi(4)).sum();
    if den == 0.0 {
        return Err(Error::Config("quadratic fit needs a point with beta > 0".into()));
    }
    Ok(points.iter().map(|(b, d)| b * b * d).sum::<f64>() / den)
}

/// Draws one interpolant state at `(x_t, r, t)` from a posterior `x₀`.
pub fn posterior_sample(x_t: &[f64], x0: &[f64], r: f64, t: f64) -> InterpolantSample {
    let x1: Vec<f64> = x_t.iter().zip(x0).map(|(x, a)| (x - (1.0 - t) * a) / t).collect();
    let mut s = InterpolantSample::new(x0.to_vec(), x1, t, r);
    s.x_t = x_t.to_vec();
    s.v_cond = x_t.iter().zip(x0).map(|(x, a)| (x - a) / t).collect();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_replicas_have_zero_trace() {
        let (tr, norms) = replica_trace(5, |_| Ok(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(tr, 0.0);
        assert_eq!(norms.len(), 5);
    }

    #[test]
    fn trace_uses_unbiased_divisor() {
        let tr = trace_covariance(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(tr, 2.0);
    }

    #[test]
    fn worked_scalar_point() {
        let b = beta_star_scalar(1.0, 8.2e3, 700.0);
        assert!((b - 0.5 * 8200.0 / 8900.0).abs() < 1e-15);
        assert!((b - 0.46).abs() < 0.005);
    }

    #[test]
    fn scalar_is_clipped_below() {
        assert_eq!(beta_star_scalar(-0.5, 1.0, 0.0), 0.0);
        assert!(beta_star_scalar(1e9, 1.0, 0.0) < 1.0);
    }

    #[test]
    fn isotropic_unbiased_alphas_recover_shrinkage_factor() {
        for kappa in [0.1, 0.7, 1.0, 3.5] {
            let d = 4;
            let a = DMatrix::identity(d, d) * (kappa + 1.0);
            let j = DMatrix::identity(d, d) * kappa;
            let s = DMatrix::identity(d, d) * 0.3;
            let al = alpha_coefficients(&j, &a, &s, &DVector::zeros(d), None);
            assert!((al.minimizer().unwrap() - kappa / (kappa + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_a_is_degenerate() {
        let d = 2;
        let al = alpha_coefficients(
            &(-DMatrix::identity(d, d)),
            &DMatrix::zeros(d, d),
            &DMatrix::identity(d, d),
            &DVector::from_vec(vec![0.3, 0.1]),
            None,
        );
        assert!(matches!(al.minimizer(), Err(Error::DegenerateQuadratic(_))));
    }

    #[test]
    fn quadratic_fit_cases() {
        assert_eq!(fit_quadratic_coefficient(&[(1.0, 3.0)]).unwrap(), 3.0);
        let pts: Vec<(f64, f64)> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&b| (b, 1.7 * b * b)).collect();
        assert!((fit_quadratic_coefficient(&pts).unwrap() - 1.7).abs() < 1e-12);
        assert!(fit_quadratic_coefficient(&[(0.0, 1.0)]).is_err());
    }
}
