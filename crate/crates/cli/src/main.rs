use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use meta_core::app::{self, Command, ExitStatus, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    /// Run every invariant suite and report each result.
    Check,
    /// Counter sweep over norm sharing, attention layout and map size (CSV).
    Bench,
    /// Train the toy segmentation task; writes loss.csv, checkpoint/, summary.json.
    TrainToy,
    /// Entropy and mutual information between branch outputs.
    Diag,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Check => Command::Check,
            Cmd::Bench => Command::Bench,
            Cmd::TrainToy => Command::TrainToy,
            Cmd::Diag => Command::Diag,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meta", version, about = "Memory-efficient adapter toolkit")]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON file of flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file (check, diag), CSV file (bench) or output directory (train-toy).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.width=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn config(args: &Args) -> meta_core::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.out = args.out.clone();
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = match config(&args) {
        Ok(cfg) => app::run(args.command.into(), &cfg),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(ExitStatus::ConfigError.code() as u8);
        }
    };
    println!("{}", serde_json::to_string_pretty(&outcome.report).expect("report serializes"));
    if let Some(err) = outcome.report.get("error") {
        eprintln!("error: {}", err.as_str().unwrap_or_default());
    }
    ExitCode::from(outcome.status.code() as u8)
}
