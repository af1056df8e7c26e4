use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential moving average of a parameter vector: `θ̄ ← μθ̄ + (1 − μ)θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    shadow: Vec<f64>,
    decay: f64,
}

impl EmaState {
    /// Starts the shadow at `params`. `decay` must lie in `[0, 1)`.
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            shadow: params.to_vec(),
            decay,
        })
    }

    pub(crate) fn from_parts(shadow: Vec<f64>, decay: f64) -> Self {
        Self { shadow, decay }
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shadow.len(),
                got: params.len(),
            });
        }
        let mu = self.decay;
        let one_minus = 1.0 - mu;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = mu * *s + one_minus * p;
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}
