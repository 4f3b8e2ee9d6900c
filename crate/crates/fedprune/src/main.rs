//! Command-line front end: run experiments, inspect checkpoints, compare
//! strategies. Exit code 2 flags configuration or usage problems, 3 flags
//! runtime failures; everything a command writes lands under its --out.

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod compare;
mod config;
mod inspect;
mod manifest;
mod run;

#[derive(Parser)]
#[command(name = "fedprune", version, about = "Federated fine-tuning simulator with layer pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config file.
    Run(run::RunArgs),
    /// Export telemetry from a saved checkpoint.
    Inspect(inspect::InspectArgs),
    /// Run a (strategy, seed) comparison matrix.
    Compare(compare::CompareArgs),
}

/// Failures split by exit code: `Usage` is a bad config or bad invocation
/// (exit 2), `Runtime` is a failure while executing a valid request (exit 3).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(args),
        Command::Inspect(args) => inspect::cmd_inspect(args),
        Command::Compare(args) => compare::cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
