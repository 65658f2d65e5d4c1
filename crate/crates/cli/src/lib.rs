//! Config-driven experiment runner around the `roughbsde` library.

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiments::{Check, Outcome};
use manifest::Manifest;

/// Environment variable naming the output root.
pub const OUTPUT_ROOT_VAR: &str = "ROUGHBSDE_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

/// Result of `run`: where artifacts went and what the audits said.
#[derive(Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub outcome: Outcome,
    pub manifest: Manifest,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.outcome.passed() {
            0
        } else {
            1
        }
    }
}

/// Runs one experiment into `root/<output name>` and writes its manifest.
pub fn run(cfg: &ExperimentConfig, root: &Path) -> Result<RunReport, CliError> {
    let spec = experiments::find(&cfg.experiment)
        .ok_or_else(|| CliError::Config(format!("unknown experiment `{}`", cfg.experiment)))?;
    let dir = root.join(cfg.output_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let start = Instant::now();
    let outcome = (spec.run)(cfg, &dir)?;
    let manifest = Manifest::new(cfg, &outcome, start.elapsed().as_secs_f64());
    manifest.write(&dir.join("manifest.json"))?;
    for c in outcome.checks.iter().filter(|c| !c.passed) {
        let record = error::ErrorRecord {
            kind: "audit",
            experiment: Some(&cfg.experiment),
            message: format!("check `{}` failed with value {:e}", c.name, c.value),
            exit_code: 1,
        };
        append_record(root, &record);
    }
    Ok(RunReport { dir, outcome, manifest })
}

/// Appends one JSON line to `root/errors.jsonl` and echoes it to stderr.
pub fn log_error(root: &Path, experiment: Option<&str>, err: &CliError) {
    let record = error::ErrorRecord {
        kind: err.kind(),
        experiment,
        message: err.to_string(),
        exit_code: err.exit_code(),
    };
    append_record(root, &record);
}

fn append_record(root: &Path, record: &error::ErrorRecord<'_>) {
    let line = serde_json::to_string(record).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", record.message));
    eprintln!("{line}");
    if fs::create_dir_all(root).is_ok() {
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(root.join("errors.jsonl")) {
            let _ = writeln!(f, "{line}");
        }
    }
}
