//! Checkpoint layout: a model container (`model.bin`) plus a JSON manifest
//! carrying everything `inspect` needs without re-running the experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedprune_core::fed::{ExperimentConfig, ExperimentOutput, RoundDiagnostics, Strategy};
use fedprune_core::model::save_model;
use fedprune_core::records::{ExperimentSummary, RoundRecord};

use crate::CliError;

pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub summary: ExperimentSummary,
    pub records: Vec<RoundRecord>,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub fleet: Vec<FleetInfo>,
}

/// Per-device fleet facts worth keeping with a checkpoint; shards stay out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetInfo {
    pub id: usize,
    pub memory_budget: f64,
    pub shard_size: usize,
    pub affordable: Option<usize>,
    pub strategy_override: Option<Strategy>,
}

pub fn write_checkpoint(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &ExperimentOutput,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    save_model(&out.state.model, &dir.join(MODEL_FILE))
        .map_err(|e| CliError::Runtime(format!("checkpoint container: {e}")))?;
    let manifest = Manifest {
        config: cfg.clone(),
        summary: out.summary.clone(),
        records: out.records.clone(),
        diagnostics: out.diagnostics.clone(),
        fleet: out
            .fleet
            .devices
            .iter()
            .map(|d| FleetInfo {
                id: d.profile.id,
                memory_budget: d.profile.memory_budget,
                shard_size: d.profile.shard.len(),
                affordable: d.affordable,
                strategy_override: d.profile.strategy_override,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)
        .map_err(|e| CliError::Runtime(format!("manifest write: {e}")))?;
    Ok(())
}

/// Accepts either a checkpoint directory or a direct path to its manifest.
pub fn read_manifest(checkpoint: &Path) -> Result<Manifest, CliError> {
    let path: PathBuf =
        if checkpoint.is_dir() { checkpoint.join(MANIFEST_FILE) } else { checkpoint.to_path_buf() };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))
}
