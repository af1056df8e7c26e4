//! Training loop, optimizers, checkpointing and the β-sweep driver.
//!
//! One step draws a batch from the per-step data, noise, time and anchor
//! streams, evaluates the proxy (an extra forward pass of the EMA shadow when
//! β > 0), takes the stop-gradient gradient, applies the optimizer and then
//! moves the EMA. Probes draw from their own stream, so the probe cadence
//! never changes the trajectory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_interpolant, Dataset, DatasetSpec, InterpolantBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model_once, mean_sem, SwConfig};
use crate::gmm_oracle::MixtureSpec;
use crate::losses::{batch_loss_and_grad, batch_proxy, BatchLoss, BatchTerms, ProxyContext, ProxySource, TangentPolicy};
use crate::net::{
    forward_batch, Activation, Architecture, Checkpoint, EmaState, MlpModel, OptimizerSnapshot, DEFAULT_INIT_GAIN,
};
use crate::probes::grad_variance;
use crate::rng::{step_rng, stream_rng, Stream};

pub const METRICS_HEADER: &str = "step,mf_loss,fm_loss,var_trace,sw1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "TangentPolicy::vanilla")]
    pub policy: TangentPolicy,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_probe")]
    pub probe_every: u64,
    /// 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_gain")]
    pub init_gain: f64,
    /// Probability that a draw has `r = t`.
    #[serde(default = "d_overlap")]
    pub overlap: f64,
    /// Replica count of the gradient-variance probe.
    #[serde(default = "d_replicas")]
    pub probe_replicas: usize,
    /// Compute SW₁ at every probe row.
    #[serde(default = "d_true")]
    pub probe_sw: bool,
    #[serde(default)]
    pub sw: SwConfig,
}

fn d_steps() -> u64 {
    20_000
}
fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    1e-3
}
fn d_ema() -> f64 {
    0.999
}
fn d_seed() -> u64 {
    42
}
fn d_probe() -> u64 {
    2000
}
fn d_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn d_gain() -> f64 {
    DEFAULT_INIT_GAIN
}
fn d_overlap() -> f64 {
    0.25
}
fn d_replicas() -> usize {
    8
}
fn d_true() -> bool {
    true
}

impl TrainConfig {
    /// Defaults for a dataset, with the vanilla policy.
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            policy: TangentPolicy::vanilla(),
            steps: d_steps(),
            batch_size: d_batch(),
            lr: d_lr(),
            ema_decay: d_ema(),
            seed: d_seed(),
            probe_every: d_probe(),
            checkpoint_every: 0,
            optimizer: OptimizerConfig::default(),
            hidden: d_hidden(),
            init_gain: d_gain(),
            overlap: d_overlap(),
            probe_replicas: d_replicas(),
            probe_sw: true,
            sw: SwConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.policy.validate()?;
        self.sw.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        // lr = 0 is allowed: it freezes the parameters, which is useful as a
        // control run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.probe_every == 0 {
            return bad("probe_every must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if self.probe_replicas < 2 {
            return bad("probe_replicas must be >= 2");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return bad("init_gain must be positive");
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        if self.policy.proxy == ProxySource::AnalyticOracle && self.dataset.kind != crate::datasets::DatasetKind::Dgmm {
            return bad("the analytic oracle proxy needs a DGMM dataset");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.dataset.d, &self.hidden, Activation::Silu)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer with its moment state.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        lr: f64,
        step: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, lr: f64, n_params: usize) -> Self {
        match cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                lr,
                step: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
            OptimizerConfig::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr } => *lr = new_lr,
        }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                lr,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        match self {
            Optimizer::Adam { step, m, v, .. } => OptimizerSnapshot::Adam {
                step: *step,
                m: m.clone(),
                v: v.clone(),
            },
            Optimizer::Sgd { .. } => OptimizerSnapshot::Sgd,
        }
    }

    fn restore(&mut self, snap: &OptimizerSnapshot) -> Result<()> {
        match (self, snap) {
            (Optimizer::Adam { step, m, v, .. }, OptimizerSnapshot::Adam { step: s, m: sm, v: sv }) => {
                if sm.len() != m.len() || sv.len() != v.len() {
                    return Err(Error::Checkpoint("optimizer moment length mismatch".into()));
                }
                *step = *s;
                m.copy_from_slice(sm);
                v.copy_from_slice(sv);
                Ok(())
            }
            (Optimizer::Sgd { .. }, OptimizerSnapshot::Sgd) => Ok(()),
            _ => Err(Error::Checkpoint("optimizer kind differs from the config".into())),
        }
    }
}

/// One probe row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub mf_loss: f64,
    pub fm_loss: f64,
    pub var_trace: f64,
    pub sw1: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let sw = self.sw1.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.mf_loss, self.fm_loss, self.var_trace, sw)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(Error::Config(format!("bad metrics row: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s}: {e}")));
        Ok(Self {
            step: f[0].parse().map_err(|e| Error::Config(format!("bad step {}: {e}", f[0])))?,
            mf_loss: num(f[1])?,
            fm_loss: num(f[2])?,
            var_trace: num(f[3])?,
            sw1: if f[4].is_empty() { None } else { Some(num(f[4])?) },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<MetricRow>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Mean `var_trace` over rows in the second half of training.
    pub tail_var_trace: Option<f64>,
    pub tail_var_sem: Option<f64>,
    /// SW₁ of the final model under the run seed and `config.sw`.
    pub final_sw1: f64,
    pub final_sw2: f64,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Tail average of the variance trace: rows with `step ≥ steps / 2`.
pub fn tail_average(rows: &[MetricRow], steps: u64) -> Option<(f64, f64)> {
    let tail: Vec<f64> = rows.iter().filter(|r| 2 * r.step >= steps).map(|r| r.var_trace).collect();
    if tail.is_empty() {
        None
    } else {
        Some(mean_sem(&tail))
    }
}

/// Draws `x₁ ∼ N(0, I)` and returns `x₁ − u(x₁, 0, 1)`.
pub fn one_step_sample<R: Rng + ?Sized>(model: &MlpModel, noise_rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>> {
    let d = model.d();
    let mut inputs = Vec::with_capacity(n * (d + 2));
    let mut x1 = Vec::with_capacity(n * d);
    for _ in 0..n {
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(noise_rng);
            x1.push(z);
            inputs.push(z);
        }
        inputs.push(0.0);
        inputs.push(1.0);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let u = forward_batch(model.arch(), model.params(), &inputs)?;
    Ok(x1
        .chunks_exact(d)
        .zip(u.chunks_exact(d))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
        .collect())
}

/// The batch and anchor offsets used at one training step.
pub fn draw_training_batch(cfg: &TrainConfig, data: &Dataset, step: u64) -> (InterpolantBatch, Vec<f64>) {
    let s = cfg.seed;
    let batch = sample_interpolant(
        &mut step_rng(s, Stream::Data, step),
        &mut step_rng(s, Stream::Noise, step),
        &mut step_rng(s, Stream::Time, step),
        data,
        cfg.batch_size,
        cfg.overlap,
    );
    let deltas = if cfg.policy.anchor_lambda > 0.0 {
        let [lo, hi] = cfg.policy.anchor_delta;
        let mut rng = step_rng(s, Stream::Anchor, step);
        (0..cfg.batch_size).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
    } else {
        Vec::new()
    };
    (batch, deltas)
}

/// Live training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    oracle: Option<MixtureSpec>,
    model: MlpModel,
    ema: EmaState,
    optimizer: Optimizer,
    step: u64,
    grad: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture()?;
        let model = MlpModel::init(arch, config.init_gain, &mut stream_rng(config.seed, Stream::Init));
        Self::assemble(config, model, None, 0)
    }

    /// Rebuilds the state saved in `ckpt`; architecture and seed must agree
    /// with `config`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture()?;
        if ckpt.model.arch() != &arch {
            return Err(Error::Checkpoint("checkpoint architecture differs from the config".into()));
        }
        if ckpt.seed != config.seed {
            return Err(Error::Checkpoint(format!("checkpoint seed {} differs from config seed {}", ckpt.seed, config.seed)));
        }
        let ema = ckpt.ema.clone();
        let mut t = Self::assemble(config, ckpt.model, ema, ckpt.step)?;
        t.optimizer.restore(&ckpt.optimizer)?;
        Ok(t)
    }

    fn assemble(config: TrainConfig, model: MlpModel, ema: Option<EmaState>, step: u64) -> Result<Self> {
        let data = Dataset::new(config.dataset.clone())?;
        let oracle = if config.policy.proxy == ProxySource::AnalyticOracle {
            Some(data.mixture()?)
        } else {
            None
        };
        let ema = match ema {
            Some(e) => e,
            None => EmaState::new(model.params(), config.ema_decay)?,
        };
        let optimizer = Optimizer::new(config.optimizer, config.lr, model.n_params());
        let grad = vec![0.0; model.n_params()];
        Ok(Self {
            config,
            data,
            oracle,
            model,
            ema,
            optimizer,
            step,
            grad,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn proxy_context(&self) -> ProxyContext<'_> {
        ProxyContext {
            ema: Some(&self.ema),
            oracle: self.oracle.as_ref(),
        }
    }

    /// One iteration. On error the state is left as it was before the call.
    pub fn step(&mut self) -> Result<BatchLoss> {
        let next = self.step + 1;
        let (batch, deltas) = draw_training_batch(&self.config, &self.data, next);
        let ctx = ProxyContext {
            ema: Some(&self.ema),
            oracle: self.oracle.as_ref(),
        };
        let proxy = batch_proxy(&self.model, &self.config.policy, ctx, &batch)?;
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let terms = BatchTerms {
            deltas: &deltas,
            proxy: proxy.as_deref(),
        };
        let loss = batch_loss_and_grad(&self.model, &batch, &self.config.policy, terms, Some(&mut self.grad))?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { sample: 0 });
        }
        if let Some(i) = self.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        self.optimizer.apply(self.model.params_mut(), &self.grad);
        self.ema.update(self.model.params())?;
        self.step = next;
        Ok(loss)
    }

    /// Probe row at the current step.
    pub fn probe(&self) -> Result<MetricRow> {
        let mut rng = step_rng(self.config.seed, Stream::Probe, self.step);
        let report = grad_variance(
            &self.model,
            &self.config.policy,
            self.proxy_context(),
            &self.data,
            self.config.probe_replicas,
            self.config.batch_size,
            self.config.overlap,
            &mut rng,
        )?;
        let sw1 = if self.config.probe_sw {
            Some(evaluate_model_once(&self.model, &self.data, &self.config.sw, self.config.seed)?.sw1)
        } else {
            None
        };
        Ok(MetricRow {
            step: self.step,
            mf_loss: report.mean_mf_loss,
            fm_loss: report.mean_fm_loss,
            var_trace: report.trace_cov,
            sw1,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            ema: Some(self.ema.clone()),
            optimizer: self.optimizer.snapshot(),
            step: self.step,
            seed: self.config.seed,
            init_gain: self.config.init_gain,
        }
    }

    /// Trains up to `config.steps`, writing metrics and checkpoints under
    /// `out` when given.
    pub fn run(&mut self, out: Option<&Path>, mut rows: Vec<MetricRow>) -> Result<RunRecord> {
        let started = Instant::now();
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints"))?;
                fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
                let mut f = fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "{METRICS_HEADER}")?;
                for r in &rows {
                    writeln!(f, "{}", r.to_csv())?;
                }
                Some(f)
            }
            None => None,
        };
        let total = self.config.steps;
        while self.step < total {
            if let Err(e) = self.step() {
                let checkpoint = match out {
                    Some(dir) => {
                        let p = dir.join("last_good.ckpt");
                        self.checkpoint().save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                log_divergence(&e);
                return Err(Error::Diverged {
                    step: self.step + 1,
                    checkpoint,
                });
            }
            let s = self.step;
            if s % self.config.probe_every == 0 || s == total {
                let row = self.probe()?;
                if let Some(f) = csv.as_mut() {
                    writeln!(f, "{}", row.to_csv())?;
                    f.flush()?;
                }
                rows.push(row);
            }
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && s % self.config.checkpoint_every == 0 && s < total {
                    self.checkpoint().save(&dir.join("checkpoints").join(format!("step_{s:08}.ckpt")))?;
                }
            }
        }
        let final_checkpoint = match out {
            Some(dir) => {
                let p = dir.join("final.ckpt");
                self.checkpoint().save(&p)?;
                Some(p)
            }
            None => None,
        };
        let fin = evaluate_model_once(&self.model, &self.data, &self.config.sw, self.config.seed)?;
        let tail = tail_average(&rows, total);
        let record = RunRecord {
            config: self.config.clone(),
            rows,
            final_checkpoint,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            tail_var_trace: tail.map(|t| t.0),
            tail_var_sem: tail.map(|t| t.1),
            final_sw1: fin.sw1,
            final_sw2: fin.sw2,
        };
        if let Some(dir) = out {
            fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
        }
        Ok(record)
    }
}

fn log_divergence(e: &Error) {
    eprintln!("training aborted: {e}");
}

/// Fresh run.
pub fn train(config: TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    Trainer::new(config)?.run(out, Vec::new())
}

/// Continues from a checkpoint to `config.steps`. Rows already present in
/// `out/metrics.csv` up to the checkpoint step are kept.
pub fn train_from(config: TrainConfig, checkpoint: &Path, out: Option<&Path>) -> Result<RunRecord> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let resume_at = ckpt.step;
    let mut trainer = Trainer::from_checkpoint(config, ckpt)?;
    let rows = match out.map(|d| d.join("metrics.csv")) {
        Some(p) if p.exists() => read_metrics(&p)?.into_iter().filter(|r| r.step <= resume_at).collect(),
        _ => Vec::new(),
    };
    trainer.run(out, rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricRow::from_csv)
        .collect()
}

/// Policy used for one β cell of a sweep: β = 0 is plain MeanFlow; β > 0
/// keeps the base proxy and anchor, falling back to the EMA recipe when the
/// base has no proxy.
pub fn policy_for_beta(base: &TangentPolicy, beta: f64) -> TangentPolicy {
    if beta == 0.0 {
        TangentPolicy::vanilla()
    } else if base.proxy == ProxySource::None {
        TangentPolicy::ema_recipe().with_beta(beta)
    } else {
        base.with_beta(beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dataset: String,
    pub beta: f64,
    pub runs: usize,
    pub sw1_mean: f64,
    pub sw1_sem: f64,
    pub sw2_mean: f64,
    pub sw2_sem: f64,
    pub var_trace_mean: f64,
    pub var_trace_sem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

pub const SWEEP_HEADER: &str = "dataset,beta,runs,sw1_mean,sw1_sem,sw2_mean,sw2_sem,var_trace_mean,var_trace_sem";

impl SweepTable {
    pub fn failures(&self) -> Vec<&SweepCell> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }

    pub fn summary_for(&self, beta: f64) -> Option<&SweepSummary> {
        self.summary.iter().find(|s| s.beta == beta)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.dataset, r.beta, r.runs, r.sw1_mean, r.sw1_sem, r.sw2_mean, r.sw2_sem, r.var_trace_mean, r.var_trace_sem
            ));
        }
        s
    }
}

/// One run per `(β, seed)`; failures are recorded and the sweep continues.
/// Runs execute on up to `threads` workers and the table is ordered by
/// `(β, seed)` regardless.
pub fn sweep(base: &TrainConfig, betas: &[f64], seeds: &[u64], out: Option<&Path>, threads: usize) -> Result<SweepTable> {
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::Config(format!("beta {b} outside [0, 1]")));
    }
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one beta and one seed".into()));
    }
    let jobs: Vec<(f64, u64)> = betas.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let run = |&(beta, seed): &(f64, u64)| -> SweepCell {
        let mut cfg = base.clone();
        cfg.policy = policy_for_beta(&base.policy, beta);
        cfg.seed = seed;
        let dir = out.map(|d| d.join(format!("beta_{beta:.2}_seed_{seed}")));
        match train(cfg, dir.as_deref()) {
            Ok(r) => SweepCell {
                beta,
                seed,
                record: Some(r),
                error: None,
            },
            Err(e) => SweepCell {
                beta,
                seed,
                record: None,
                error: Some(e.to_string()),
            },
        }
    };
    let cells: Vec<SweepCell> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut summary = Vec::new();
    for &beta in betas {
        let recs: Vec<&RunRecord> = cells.iter().filter(|c| c.beta == beta).filter_map(|c| c.record.as_ref()).collect();
        if recs.is_empty() {
            continue;
        }
        let (sw1_mean, sw1_sem) = mean_sem(&recs.iter().map(|r| r.final_sw1).collect::<Vec<_>>());
        let (sw2_mean, sw2_sem) = mean_sem(&recs.iter().map(|r| r.final_sw2).collect::<Vec<_>>());
        let vt: Vec<f64> = recs.iter().filter_map(|r| r.tail_var_trace).collect();
        let (var_trace_mean, var_trace_sem) = mean_sem(&vt);
        summary.push(SweepSummary {
            dataset: base.dataset.kind.to_string(),
            beta,
            runs: recs.len(),
            sw1_mean,
            sw1_sem,
            sw2_mean,
            sw2_sem,
            var_trace_mean,
            var_trace_sem,
        });
    }
    let table = SweepTable { cells, summary };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), table.summary_csv())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetKind;

    fn tiny(kind: DatasetKind) -> TrainConfig {
        let mut c = TrainConfig::new(DatasetSpec::toy(kind));
        c.hidden = vec![16, 16];
        c.steps = 20;
        c.batch_size = 32;
        c.probe_every = 10;
        c.probe_sw = false;
        c.sw.n_samples = 256;
        c.sw.n_projections = 20;
        c
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = tiny(DatasetKind::TwoMoons);
        c.policy = TangentPolicy::ema_recipe();
        c.optimizer = OptimizerConfig::Sgd;
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let c = TrainConfig::from_toml("[dataset]\nkind = \"checkerboard\"\n").unwrap();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.probe_every, 2000);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.ema_decay, 0.999);
        assert_eq!(c.optimizer, OptimizerConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = tiny(DatasetKind::TwoMoons);
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = tiny(DatasetKind::TwoMoons);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny(DatasetKind::TwoMoons);
        c.lr = -1.0;
        assert!(c.validate().is_err());
        let mut c = tiny(DatasetKind::TwoMoons);
        c.policy = TangentPolicy {
            proxy: ProxySource::AnalyticOracle,
            ..TangentPolicy::ema_recipe()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut o = Optimizer::new(OptimizerConfig::Sgd, 0.5, 2);
        let mut p = vec![1.0, 2.0];
        o.apply(&mut p, &[2.0, -4.0]);
        assert_eq!(p, vec![0.0, 4.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut o = Optimizer::new(OptimizerConfig::default(), 0.1, 2);
        let mut p = vec![0.0, 0.0];
        o.apply(&mut p, &[3.0, -0.5]);
        // Bias-corrected first step is lr · sign(g) up to ε.
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_model_samples_are_noise() {
        let arch = Architecture::new(2, &[4], Activation::Silu).unwrap();
        let m = MlpModel::zeros(arch);
        let mut a = stream_rng(1, Stream::Eval);
        let mut b = stream_rng(1, Stream::Eval);
        let xs = one_step_sample(&m, &mut a, 10).unwrap();
        for x in xs {
            for v in x {
                let z: f64 = StandardNormal.sample(&mut b);
                assert_eq!(v, z);
            }
        }
    }

    #[test]
    fn metric_rows_round_trip() {
        let r = MetricRow {
            step: 7,
            mf_loss: 0.1 + 0.2,
            fm_loss: 0.0,
            var_trace: 1e-17,
            sw1: None,
        };
        assert_eq!(MetricRow::from_csv(&r.to_csv()).unwrap(), r);
        let r2 = MetricRow { sw1: Some(0.3), ..r };
        assert_eq!(MetricRow::from_csv(&r2.to_csv()).unwrap(), r2);
    }

    #[test]
    fn rows_increase_and_end_at_final_step() {
        let mut c = tiny(DatasetKind::EightGaussians);
        c.steps = 25;
        let rec = train(c, None).unwrap();
        let steps: Vec<u64> = rec.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
    }

    #[test]
    fn beta_zero_cell_is_vanilla() {
        assert_eq!(policy_for_beta(&TangentPolicy::ema_recipe(), 0.0), TangentPolicy::vanilla());
        let p = policy_for_beta(&TangentPolicy::vanilla(), 0.5);
        assert_eq!(p.proxy, ProxySource::EmaBoundary);
        assert_eq!(p.beta, 0.5);
        assert_eq!(p.anchor_lambda, 0.5);
    }
}
