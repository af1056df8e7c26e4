//! Run manifests: what was run, with which inputs, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Defaults that were chosen locally rather than taken from a published
    /// setup.
    pub assumptions: Vec<String>,
    pub failures: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ExperimentManifest {
    pub fn new(command: &str, config_text: &str, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            seeds,
            code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
            assumptions: default_assumptions(),
            failures: Vec::new(),
        }
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn write(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_unix = now_unix();
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        self.outputs.sort();
        self.outputs.dedup();
        std::fs::write(&path, serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?)?;
        Ok(path)
    }
}

pub fn default_assumptions() -> Vec<String> {
    [
        "optimizer adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8), constant rate",
        "ema decay 0.999 on toy and DGMM runs",
        "(r, t) = sorted pair of uniforms, r = t with probability 0.25",
        "batch loss is the mean over samples",
        "beta > 0 cells use the EMA tangent with the flow-matching anchor; beta = 0 is plain MeanFlow",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}
