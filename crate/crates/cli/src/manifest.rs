//! Run manifest: written before any result file so a crashed run still
//! identifies itself, rewritten with totals when the run completes.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub seed: u64,
    /// SHA-256 of the raw config file bytes.
    pub config_sha256: String,
    pub version: String,
    pub threads: usize,
    /// "running" until the final rewrite.
    pub status: String,
    /// Counted forward solves at write time.
    pub forward_evals: u64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn begin(experiment: &str, seed: u64, raw_config: &str, threads: usize) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            config_sha256: Sha256::digest(raw_config.as_bytes())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            status: "running".to_string(),
            forward_evals: 0,
            wall_seconds: 0.0,
        }
    }

    pub fn write(&self, out: &Path) -> Result<(), Failure> {
        crate::emit::write_json(&out.join("manifest.json"), self)
    }

    pub fn finish(&mut self, out: &Path, forward_evals: u64, started: Instant) -> Result<(), Failure> {
        self.status = "complete".to_string();
        self.forward_evals = forward_evals;
        self.wall_seconds = started.elapsed().as_secs_f64();
        self.write(out)
    }
}
