//! Command implementations behind the `meta` binary.

pub mod bench;
pub mod check;
pub mod config;
pub mod diag;
pub mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{Command, RunConfig};

use crate::error::Error;

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    InvariantFailure = 1,
    ConfigError = 2,
    NumericFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// Status for a command that failed with `e`.
    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) => ExitStatus::ConfigError,
            Error::NonFinite(_) => ExitStatus::NumericFailure,
            _ => ExitStatus::InvariantFailure,
        }
    }
}

/// Result of one command: the status plus the report printed or written.
#[derive(Debug)]
pub struct Outcome {
    pub status: ExitStatus,
    pub report: serde_json::Value,
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn write_json(path: &Path, v: &serde_json::Value) -> crate::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn error_report(cfg: &RunConfig, e: &Error) -> serde_json::Value {
    serde_json::json!({ "config_hash": cfg.hash(), "error": e.to_string() })
}

/// Runs `command`. JSON reports go to `cfg.out` when set; `bench` and
/// `train-toy` fall back to `bench.csv` and `train-out/`.
pub fn run(command: Command, cfg: &RunConfig) -> Outcome {
    let result = (|| -> crate::Result<(ExitStatus, serde_json::Value)> {
        cfg.validate(command)?;
        match command {
            Command::Check => {
                let report = check::run_check(cfg)?;
                let status = if report.passed { ExitStatus::Ok } else { ExitStatus::InvariantFailure };
                let v = json(&report);
                if let Some(out) = &cfg.out {
                    write_json(out, &v)?;
                }
                Ok((status, v))
            }
            Command::Bench => {
                let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("bench.csv"));
                let rows = bench::run_bench(cfg, &out)?;
                Ok((ExitStatus::Ok, serde_json::json!({ "config_hash": cfg.hash(), "rows": rows.len(), "csv": out })))
            }
            Command::TrainToy => {
                let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("train-out"));
                let summary = train::run_train_toy(cfg, &out)?;
                Ok((ExitStatus::Ok, json(&summary)))
            }
            Command::Diag => {
                let v = json(&diag::run_diag(cfg)?);
                if let Some(out) = &cfg.out {
                    write_json(out, &v)?;
                }
                Ok((ExitStatus::Ok, v))
            }
        }
    })();
    match result {
        Ok((status, report)) => Outcome { status, report },
        Err(e) => Outcome { status: ExitStatus::of_error(&e), report: error_report(cfg, &e) },
    }
}
