use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use phasesched::harness::{self, ExperimentConfig, Mode, PolicyKind};
use phasesched::Error;
use serde_json::json;

/// Phase-adaptive compute scheduling experiments.
#[derive(Debug, Parser)]
#[command(name = "phasesched", version)]
struct Cli {
    mode: Mode,
    /// Experiment config (JSON). `{}` gives the defaults.
    #[arg(long)]
    config: PathBuf,
    /// Use only this scheduler training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Schedule to evaluate or diagnose instead of the configured one.
    #[arg(long = "override")]
    schedule: Option<PolicyKind>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::RejectedInput(_) => "rejected_input",
        Error::RejectedState(_) => "rejected_state",
        Error::Diverged(_) => "diverged",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

// A closed pipe on the reader's side is not our failure.
fn emit(value: &serde_json::Value) {
    let _ = writeln!(std::io::stdout(), "{value}");
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    emit(&json!({ "ok": false, "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string(), 2),
    };
    let mut config = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(error_kind(&e), format!("{}: {e}", cli.config.display()), 1),
    };
    config.mode = cli.mode;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if cli.schedule.is_some() {
        config.schedule = cli.schedule;
    }
    match harness::run(&config) {
        Ok(outcome) => {
            emit(&json!({ "ok": true, "result": outcome }));
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), e.to_string(), 1),
    }
}
