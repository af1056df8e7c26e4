//! `mfcv`: training, sweeps, probes and figure reproduction.

mod commands;
mod manifest;
mod plot;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mfcv", version, about = "MeanFlow tangent control variates: training, probes and evaluation")]
pub struct Cli {
    /// Root directory for outputs of commands run without `--out`.
    #[arg(long, env = "MFCV_OUT", default_value = "runs", global = true)]
    pub out_root: PathBuf,
    /// Overrides the seed of the config or command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// 20k steps, 1 to 3 seeds.
    Desk,
    /// 200k steps, 3 seeds. Slow.
    Full,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model from a config file.
    Train(TrainArgs),
    /// One run per (beta, seed) on the config's dataset.
    Sweep(SweepArgs),
    /// Gradient trace-covariance and per-t loss variance of a checkpoint.
    ProbeVariance(ProbeVarianceArgs),
    /// Optimal-coefficient estimators on a DGMM checkpoint.
    ProbeBeta(ProbeBetaArgs),
    /// Full versus stop-gradient gradient split on a small DGMM checkpoint.
    ProbeGap(ProbeGapArgs),
    /// Biased proxy in the tangent versus in the target.
    ProbeAsymmetry(ProbeAsymmetryArgs),
    /// Sliced Wasserstein of a checkpoint, or of every run in a sweep directory.
    EvalSw(EvalSwArgs),
    /// sqrt(Tr Cov[v' | x_t]) on a 2-D lattice.
    FieldMap(FieldMapArgs),
    /// Regenerate one figure or table.
    Reproduce(ReproduceArgs),
    /// Print an annotated default config.
    DumpConfig(DumpConfigArgs),
    /// Write dataset samples as CSV.
    DumpDataset(DumpDatasetArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint up to the config's step count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![42])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where a trained model comes from: a run directory, or an explicit
/// config and checkpoint.
#[derive(Args, Debug, Clone)]
pub struct RunSource {
    /// Run directory holding `config.toml` and `final.ckpt`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe the EMA weights instead of the online weights.
    #[arg(long)]
    pub ema: bool,
}

#[derive(Args, Debug)]
pub struct ProbeVarianceArgs {
    #[command(flatten)]
    pub source: RunSource,
    /// Replica batches per trace estimate; defaults to the config's value.
    #[arg(long)]
    pub k: Option<usize>,
    /// Tangent mixing weights to probe; defaults to the config's policy.
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 0.9])]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub gap: f64,
    /// Samples per t for the loss-variance table.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BiasArg {
    /// b = 0.
    Zero,
    /// EMA weights on the diagonal.
    Ema,
    /// Exact marginal velocity (b = 0 by construction).
    Oracle,
    /// The probed model on the diagonal.
    Model,
}

#[derive(Args, Debug)]
pub struct ProbeBetaArgs {
    #[command(flatten)]
    pub source: RunSource,
    #[arg(long, value_enum, default_value_t = BiasArg::Model)]
    pub bias: BiasArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 0.9])]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub gap: f64,
    #[arg(long, default_value_t = 512)]
    pub n_per_t: usize,
    /// Hutchinson probes for a scalar Jacobian; dense when absent.
    #[arg(long)]
    pub hutchinson: Option<usize>,
    /// Posterior draws for an empirical covariance; analytic when absent.
    #[arg(long)]
    pub n_v: Option<usize>,
    /// Weight traces by the parameter Jacobian Gram matrix.
    #[arg(long)]
    pub exact_g: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeGapArgs {
    #[command(flatten)]
    pub source: RunSource,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7, 0.9])]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub gap: f64,
    #[arg(long, default_value_t = 4)]
    pub n_per_t: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Also report the split after this many steps of stop-gradient descent
    /// on the probe points.
    #[arg(long, default_value_t = 0)]
    pub fit_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub fit_lr: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeAsymmetryArgs {
    /// Constant bias added to the exact velocity.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![-0.5, 0.0])]
    pub bias: Vec<f64>,
    /// Circumradius of the three-mode mixture.
    #[arg(long, default_value_t = 1.5)]
    pub radius: f64,
    /// Per-mode variance.
    #[arg(long, default_value_t = 0.25)]
    pub var: f64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalSwArgs {
    #[command(flatten)]
    pub source: RunSource,
    /// Evaluate every run found under this sweep directory instead.
    #[arg(long)]
    pub sweep_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
    pub eval_seeds: Vec<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_projections: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FieldMapArgs {
    /// A DGMM config with d = 2; the three-mode fixture when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
    pub t: Vec<f64>,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 3.0)]
    pub half_width: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FigureTag {
    Fig1,
    Fig2,
    Fig3,
    TableToy,
    TableDgmm,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub tag: FigureTag,
    /// Overrides the scale's step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Restrict to these datasets (toy names) or dimensions (DGMM).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConfigTag {
    Toy,
    Dgmm,
}

#[derive(Args, Debug)]
pub struct DumpConfigArgs {
    #[arg(value_enum)]
    pub tag: ConfigTag,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpDatasetArgs {
    pub dataset: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Layout seed of a DGMM.
    #[arg(long, default_value_t = 0)]
    pub layout_seed: u64,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} cell(s) failed; see manifest.json");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
