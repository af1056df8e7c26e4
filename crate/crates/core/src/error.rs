use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("covariance of x_t for component {component} is not positive definite")]
    SingularComponent { component: usize },

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("dimension {d} exceeds the dense Jacobian guard of {limit}; use the Hutchinson probe instead")]
    DenseGuard { d: usize, limit: usize },

    #[error("model has {params} parameters, above the finite-difference guard of {limit}")]
    ParamGuard { params: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} requires a proxy evaluation (beta > 0)")]
    MissingProxy { what: &'static str },

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged at step {step}; last good state kept at {checkpoint:?}")]
    Diverged {
        step: u64,
        checkpoint: Option<PathBuf>,
    },

    #[error("degenerate quadratic: alpha2 = {0}")]
    DegenerateQuadratic(f64),

    #[error("field maps need d = 2, got d = {0}")]
    FieldDimension(usize),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
