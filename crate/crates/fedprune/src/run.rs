//! `fedprune run`: execute one experiment and write its artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use fedprune_core::fed::{run_experiment, ExperimentOutput, FedError};
use fedprune_core::records::RoundRecord;

use crate::config::{load_config, ConfigFile};
use crate::manifest::write_checkpoint;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct RunArgs {
    /// JSON experiment config.
    pub config: PathBuf,
    /// Directory all artifacts are written into.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn map_fed(e: FedError) -> CliError {
    match e {
        FedError::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn write_metrics(path: &Path, records: &[RoundRecord]) -> CliResult {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| CliError::Runtime(format!("record serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| CliError::Runtime(format!("metrics write: {e}")))?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("metrics write: {e}")))
}

/// Runs the experiment described by an already-loaded config and writes
/// metrics, summary, and the optional checkpoint under `out_dir`. Shared
/// with `compare`, which calls it once per cell.
pub fn execute(cfg: &ConfigFile, out_dir: &Path) -> Result<ExperimentOutput, CliError> {
    let output = run_experiment(&cfg.experiment).map_err(map_fed)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_metrics(&out_dir.join(&cfg.output.metrics), &output.records)?;
    let summary = serde_json::to_string_pretty(&output.summary)
        .map_err(|e| CliError::Runtime(format!("summary serialization: {e}")))?;
    std::fs::write(out_dir.join(&cfg.output.summary), summary)
        .map_err(|e| CliError::Runtime(format!("summary write: {e}")))?;
    if let Some(cp) = &cfg.output.checkpoint {
        write_checkpoint(&out_dir.join(cp), &cfg.experiment, &output)?;
    }
    Ok(output)
}

pub fn cmd_run(args: RunArgs) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    let output = execute(&cfg, &args.out)?;
    println!(
        "{} seed {}: {} rounds, final eval loss {:.6}, perplexity {:.4}",
        output.summary.strategy,
        output.summary.seed,
        output.summary.rounds,
        output.summary.final_eval_loss,
        output.summary.final_perplexity
    );
    Ok(())
}
