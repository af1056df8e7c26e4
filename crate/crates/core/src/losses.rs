//! The tangent-mixed MeanFlow loss and its stop-gradient parameter gradient.
//!
//! For a draw `(x_t, r, t, v_cond)` the compound prediction is
//!
//! ```text
//! u(x_t, r, t) + (t − r) · sg[ ∂_x u · τ + ∂_t u ]
//! τ = (1 − β) v_cond + β v̂
//! ```
//!
//! and the loss is `‖compound − v_cond‖²`. The regression target is always
//! `v_cond`; β only changes the tangent `τ`. The bracketed directional
//! derivative is a plain value (forward-mode output), so no gradient can flow
//! through it. An optional flow-matching anchor `λ‖u(x_t, t − δ, t) − v_cond‖²`
//! pins the boundary `u(x, t, t) = v(x, t)`.

use serde::{Deserialize, Serialize};

use crate::datasets::{InterpolantBatch, InterpolantSample};
use crate::error::{Error, Result};
use crate::gmm_oracle::{marginal_velocity, MixtureSpec};
use crate::net::{backward, forward_batch, forward_tape, EmaState, MlpModel};

/// Largest model for which [`full_grad_fd`] runs.
pub const FD_PARAM_LIMIT: usize = 2000;

/// Where the deterministic part of the tangent comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxySource {
    None,
    /// EMA shadow evaluated on the diagonal: `ū(x_t, t, t)`.
    EmaBoundary,
    /// Exact marginal velocity of a Gaussian-mixture law.
    AnalyticOracle,
    /// The live model on the diagonal, `u(x_t, t, t)`, held constant.
    ModelBoundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TangentPolicy {
    pub beta: f64,
    pub proxy: ProxySource,
    #[serde(default)]
    pub anchor_lambda: f64,
    /// `[δ_min, δ_max]` for the anchor offset.
    #[serde(default = "default_delta")]
    pub anchor_delta: [f64; 2],
}

fn default_delta() -> [f64; 2] {
    [1e-4, 1e-2]
}

impl TangentPolicy {
    /// Plain MeanFlow: conditional tangent, no anchor.
    pub fn vanilla() -> Self {
        Self {
            beta: 0.0,
            proxy: ProxySource::None,
            anchor_lambda: 0.0,
            anchor_delta: default_delta(),
        }
    }

    /// Deterministic EMA tangent with the flow-matching anchor,
    /// `(δ_min, δ_max, λ) = (1e-4, 1e-2, 0.5)`.
    pub fn ema_recipe() -> Self {
        Self {
            beta: 1.0,
            proxy: ProxySource::EmaBoundary,
            anchor_lambda: 0.5,
            anchor_delta: default_delta(),
        }
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.beta > 0.0 && self.proxy == ProxySource::None {
            return Err(Error::Config("beta > 0 needs a proxy source".into()));
        }
        if !(self.anchor_lambda >= 0.0) || !self.anchor_lambda.is_finite() {
            return Err(Error::Config("anchor_lambda must be finite and >= 0".into()));
        }
        let [lo, hi] = self.anchor_delta;
        if self.anchor_lambda > 0.0 && !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("anchor_delta [{lo}, {hi}] must satisfy 0 <= min <= max < 1")));
        }
        Ok(())
    }
}

/// Read-only state the proxy may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyContext<'a> {
    pub ema: Option<&'a EmaState>,
    pub oracle: Option<&'a MixtureSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mf_loss: f64,
    pub fm_loss: f64,
    pub total: f64,
    pub compound_prediction: Vec<f64>,
    /// `compound − v_cond`.
    pub residual: Vec<f64>,
    pub tangent_used: Vec<f64>,
}

/// `(1 − β) v_cond + β v̂`.
pub fn mixed_tangent(policy: &TangentPolicy, sample: &InterpolantSample, proxy_eval: Option<&[f64]>) -> Result<Vec<f64>> {
    let beta = policy.beta;
    if beta == 0.0 {
        return Ok(sample.v_cond.clone());
    }
    let proxy = proxy_eval.ok_or(Error::MissingProxy { what: "mixed tangent" })?;
    if proxy.len() != sample.v_cond.len() {
        return Err(Error::DimensionMismatch {
            expected: sample.v_cond.len(),
            got: proxy.len(),
        });
    }
    if beta == 1.0 {
        return Ok(proxy.to_vec());
    }
    Ok(sample
        .v_cond
        .iter()
        .zip(proxy)
        .map(|(v, p)| (1.0 - beta) * v + beta * p)
        .collect())
}

/// Evaluates the proxy `v̂(x_t, t)` for one point, or `None` when β = 0.
pub fn proxy_eval(
    model: &MlpModel,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    x_t: &[f64],
    t: f64,
) -> Result<Option<Vec<f64>>> {
    if policy.beta == 0.0 {
        return Ok(None);
    }
    match policy.proxy {
        ProxySource::None => Err(Error::MissingProxy { what: "tangent" }),
        ProxySource::EmaBoundary => {
            let ema = ctx.ema.ok_or(Error::MissingProxy { what: "EMA tangent" })?;
            Ok(Some(model.with_params(ema.shadow().to_vec())?.forward(x_t, t, t)?))
        }
        ProxySource::ModelBoundary => Ok(Some(model.forward(x_t, t, t)?)),
        ProxySource::AnalyticOracle => {
            let mix = ctx.oracle.ok_or(Error::MissingProxy { what: "oracle tangent" })?;
            Ok(Some(marginal_velocity(mix, x_t, t)?))
        }
    }
}

/// `u(x, r, t) + (t − r) · JVP(u, (x, r, t), (tangent, 0, 1))`.
pub fn compound_prediction(model: &MlpModel, x: &[f64], r: f64, t: f64, tangent: &[f64]) -> Result<Vec<f64>> {
    let mut dir = tangent.to_vec();
    dir.push(0.0);
    dir.push(1.0);
    let j = model.jvp(x, r, t, &dir)?;
    let gap = t - r;
    Ok(j.value.iter().zip(&j.directional).map(|(u, du)| u + gap * du).collect())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn anchor_r(t: f64, delta: f64) -> f64 {
    (t - delta).max(0.0)
}

/// Per-sample loss. `delta` is the anchor offset for this sample (ignored
/// when λ = 0).
pub fn meanflow_loss(
    model: &MlpModel,
    sample: &InterpolantSample,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    delta: f64,
) -> Result<LossBreakdown> {
    policy.validate()?;
    let proxy = proxy_eval(model, policy, ctx, &sample.x_t, sample.t)?;
    let tangent = mixed_tangent(policy, sample, proxy.as_deref())?;
    let compound = compound_prediction(model, &sample.x_t, sample.r, sample.t, &tangent)?;
    let residual: Vec<f64> = compound.iter().zip(&sample.v_cond).map(|(c, v)| c - v).collect();
    let mf_loss = sq_norm(&residual);
    let fm_loss = if policy.anchor_lambda > 0.0 {
        let u = model.forward(&sample.x_t, anchor_r(sample.t, delta), sample.t)?;
        u.iter().zip(&sample.v_cond).map(|(a, b)| (a - b) * (a - b)).sum()
    } else {
        0.0
    };
    let total = mf_loss + policy.anchor_lambda * fm_loss;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { sample: 0 });
    }
    Ok(LossBreakdown {
        mf_loss,
        fm_loss,
        total,
        compound_prediction: compound,
        residual,
        tangent_used: tangent,
    })
}

/// Loss plus the gradient of the stop-gradient objective.
pub fn loss_and_semigrad(
    model: &MlpModel,
    sample: &InterpolantSample,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    delta: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let loss = meanflow_loss(model, sample, policy, ctx, delta)?;
    let seed: Vec<f64> = loss.residual.iter().map(|r| 2.0 * r).collect();
    let mut grad = model.param_grad(&sample.x_t, sample.r, sample.t, &seed)?;
    if policy.anchor_lambda > 0.0 {
        let ra = anchor_r(sample.t, delta);
        let u = model.forward(&sample.x_t, ra, sample.t)?;
        let seed: Vec<f64> = u
            .iter()
            .zip(&sample.v_cond)
            .map(|(a, b)| 2.0 * policy.anchor_lambda * (a - b))
            .collect();
        let g = model.param_grad(&sample.x_t, ra, sample.t, &seed)?;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

pub fn semigrad(
    model: &MlpModel,
    sample: &InterpolantSample,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    delta: f64,
) -> Result<Vec<f64>> {
    loss_and_semigrad(model, sample, policy, ctx, delta).map(|(_, g)| g)
}

/// Mean losses over a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub mf_loss: f64,
    pub fm_loss: f64,
    pub total: f64,
}

/// Proxy values for every row of a batch (`n × d`), or `None` when β = 0.
pub fn batch_proxy(
    model: &MlpModel,
    policy: &TangentPolicy,
    ctx: ProxyContext<'_>,
    batch: &InterpolantBatch,
) -> Result<Option<Vec<f64>>> {
    if policy.beta == 0.0 {
        return Ok(None);
    }
    let d = batch.d();
    let diag_inputs = || {
        let mut rows = Vec::with_capacity(batch.len() * (d + 2));
        for i in 0..batch.len() {
            rows.extend_from_slice(batch.row(&batch.x_t, i));
            rows.push(batch.t[i]);
            rows.push(batch.t[i]);
        }
        rows
    };
    match policy.proxy {
        ProxySource::None => Err(Error::MissingProxy { what: "tangent" }),
        ProxySource::EmaBoundary => {
            let ema = ctx.ema.ok_or(Error::MissingProxy { what: "EMA tangent" })?;
            Ok(Some(forward_batch(model.arch(), ema.shadow(), &diag_inputs())?))
        }
        ProxySource::ModelBoundary => Ok(Some(forward_batch(model.arch(), model.params(), &diag_inputs())?)),
        ProxySource::AnalyticOracle => {
            let mix = ctx.oracle.ok_or(Error::MissingProxy { what: "oracle tangent" })?;
            let mut out = Vec::with_capacity(batch.len() * d);
            for i in 0..batch.len() {
                out.extend(marginal_velocity(mix, batch.row(&batch.x_t, i), batch.t[i])?);
            }
            Ok(Some(out))
        }
    }
}

/// Options for [`batch_loss_and_grad`].
#[derive(Clone, Copy, Debug)]
pub struct BatchTerms<'a> {
    /// Per-row anchor offsets; required when λ > 0.
    pub deltas: &'a [f64],
    /// Precomputed proxy rows (`n × d`); required when β > 0.
    pub proxy: Option<&'a [f64]>,
}

/// Mean loss over the batch and, if `grad` is given, its stop-gradient
/// gradient accumulated into `grad`.
///
/// All primal rows (compound and anchor) and the tangent rows go through one
/// stacked forward pass; one backward pass covers both loss terms.
pub fn batch_loss_and_grad(
    model: &MlpModel,
    batch: &InterpolantBatch,
    policy: &TangentPolicy,
    terms: BatchTerms<'_>,
    grad: Option<&mut [f64]>,
) -> Result<BatchLoss> {
    let n = batch.len();
    let d = batch.d();
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if d != model.d() {
        return Err(Error::DimensionMismatch {
            expected: model.d(),
            got: d,
        });
    }
    let beta = policy.beta;
    let lambda = policy.anchor_lambda;
    let with_anchor = lambda > 0.0;
    if beta > 0.0 && terms.proxy.is_none() {
        return Err(Error::MissingProxy { what: "batch tangent" });
    }
    if with_anchor && terms.deltas.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: terms.deltas.len(),
        });
    }
    let width = d + 2;
    let rows = if with_anchor { 2 * n } else { n };
    let mut inputs = Vec::with_capacity(rows * width);
    let mut tangents = Vec::with_capacity(n * width);
    for i in 0..n {
        inputs.extend_from_slice(batch.row(&batch.x_t, i));
        inputs.push(batch.r[i]);
        inputs.push(batch.t[i]);
        let v = batch.row(&batch.v_cond, i);
        match terms.proxy {
            Some(p) if beta > 0.0 => {
                let p = &p[i * d..(i + 1) * d];
                tangents.extend(v.iter().zip(p).map(|(a, b)| (1.0 - beta) * a + beta * b));
            }
            _ => tangents.extend_from_slice(v),
        }
        tangents.push(0.0);
        tangents.push(1.0);
    }
    if with_anchor {
        for i in 0..n {
            inputs.extend_from_slice(batch.row(&batch.x_t, i));
            inputs.push(anchor_r(batch.t[i], terms.deltas[i]));
            inputs.push(batch.t[i]);
        }
    }
    let pass = forward_tape(model.arch(), model.params(), &inputs, Some(&tangents))?;

    let inv_n = 1.0 / n as f64;
    let mut seed = vec![0.0; rows * d];
    let mut mf = 0.0;
    let mut fm = 0.0;
    for i in 0..n {
        let gap = batch.t[i] - batch.r[i];
        let mut li = 0.0;
        for k in 0..d {
            let idx = i * d + k;
            let res = pass.outputs[idx] + gap * pass.directional[idx] - batch.v_cond[idx];
            li += res * res;
            seed[idx] = 2.0 * res * inv_n;
        }
        if !li.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        mf += li;
        if with_anchor {
            let mut la = 0.0;
            for k in 0..d {
                let idx = (n + i) * d + k;
                let res = pass.outputs[idx] - batch.v_cond[i * d + k];
                la += res * res;
                seed[idx] = 2.0 * lambda * res * inv_n;
            }
            if !la.is_finite() {
                return Err(Error::NonFiniteLoss { sample: i });
            }
            fm += la;
        }
    }
    if let Some(g) = grad {
        backward(model.arch(), model.params(), &pass.tape, &seed, g);
    }
    let mf_loss = mf * inv_n;
    let fm_loss = fm * inv_n;
    Ok(BatchLoss {
        mf_loss,
        fm_loss,
        total: mf_loss + lambda * fm_loss,
    })
}

/// Mean batch loss with the directional term recomputed at the given
/// parameters (no stop-gradient); the proxy rows stay fixed.
fn full_batch_loss(
    model: &MlpModel,
    params: &[f64],
    batch: &InterpolantBatch,
    policy: &TangentPolicy,
    terms: BatchTerms<'_>,
) -> Result<f64> {
    let m = model.with_params(params.to_vec())?;
    Ok(batch_loss_and_grad(&m, batch, policy, terms, None)?.total)
}

/// Central finite-difference gradient of the batch loss without
/// stop-gradient: the JVP is re-evaluated at every perturbed parameter.
pub fn full_grad_fd(
    model: &MlpModel,
    batch: &InterpolantBatch,
    policy: &TangentPolicy,
    terms: BatchTerms<'_>,
    h: f64,
) -> Result<Vec<f64>> {
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
    fd_gradient(model.params(), h, |theta| full_batch_loss(model, theta, batch, policy, terms))
}

/// Central finite differences of a scalar function of the parameters.
pub fn fd_gradient(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = vec![0.0; params.len()];
    for j in 0..params.len() {
        let orig = theta[j];
        theta[j] = orig + h;
        let up = f(&theta)?;
        theta[j] = orig - h;
        let down = f(&theta)?;
        theta[j] = orig;
        out[j] = (up - down) / (2.0 * h);
    }
    Ok(out)
}
