use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiments::{Check, Outcome};

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub roughbsde: &'static str,
    pub roughbsde_cli: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub experiment: String,
    /// SHA-256 of the canonical config text.
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, outcome: &Outcome, wall_time_s: f64) -> Self {
        Self {
            experiment: cfg.experiment.clone(),
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            versions: Versions { roughbsde: roughbsde::VERSION, roughbsde_cli: env!("CARGO_PKG_VERSION") },
            wall_time_s,
            passed: outcome.passed(),
            checks: outcome.checks.clone(),
            artifacts: outcome.artifacts.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
