use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roughbsde_cli::experiments::SPECS;
use roughbsde_cli::{load, log_error, output_root, run};

/// Experiment runner for rough paths and rough BSDE solvers.
#[derive(Parser)]
#[command(name = "roughbsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// List experiment ids.
    ListExperiments,
    /// Parse a config and print it with defaults filled in.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = output_root();
    match cli.command {
        Command::ListExperiments => {
            for s in SPECS {
                println!("{:<26}{}", s.id, s.description);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                print!("{}", cfg.to_text());
                ExitCode::SUCCESS
            }
            Err(e) => {
                log_error(&root, None, &e);
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Run { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    log_error(&root, None, &e);
                    return ExitCode::from(e.exit_code() as u8);
                }
            };
            match run(&cfg, &root) {
                Ok(report) => {
                    for c in &report.outcome.checks {
                        let bounds = match (c.min, c.max) {
                            (Some(lo), Some(hi)) => format!("in [{lo}, {hi}]"),
                            (None, Some(hi)) => format!("<= {hi}"),
                            (Some(lo), None) => format!(">= {lo}"),
                            (None, None) => String::new(),
                        };
                        println!("{} {} = {} {bounds}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
                    }
                    println!("{} -> {}", cfg.experiment, report.dir.display());
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e) => {
                    log_error(&root, Some(&cfg.experiment), &e);
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
