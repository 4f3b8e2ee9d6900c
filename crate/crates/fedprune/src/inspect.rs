//! `fedprune inspect`: export telemetry from a checkpoint manifest.
//! Similarity matrices go out as CSV, everything else as JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use fedprune_core::records::layer_frequency_report;

use crate::manifest::{read_manifest, Manifest};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint directory (or a direct path to its manifest.json).
    pub checkpoint: PathBuf,
    /// Which telemetry to export.
    #[arg(long, value_enum)]
    pub what: What,
    /// Directory the export is written into.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum What {
    /// Per-participant layer similarity matrices of the last round, as CSV.
    Similarity,
    /// Last round's per-device functional groups.
    Grouping,
    /// Last round's per-device submodel plans.
    Plan,
    /// Unit selection counts across all rounds.
    Frequency,
}

#[derive(Serialize)]
struct GroupingExport<'a> {
    round: usize,
    devices: Vec<DeviceGroups<'a>>,
}

#[derive(Serialize)]
struct DeviceGroups<'a> {
    device_id: usize,
    groups: &'a [Vec<String>],
    probabilities: &'a [Vec<f64>],
}

#[derive(Serialize)]
struct PlanExport<'a> {
    round: usize,
    devices: Vec<DevicePlan<'a>>,
}

#[derive(Serialize)]
struct DevicePlan<'a> {
    device_id: usize,
    affordable_units: usize,
    plan: &'a [String],
}

fn write_out(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("export serialization: {e}")))?;
    write_out(path, &text)
}

fn export_similarity(manifest: &Manifest, out: &Path) -> CliResult {
    let diag = manifest
        .diagnostics
        .last()
        .ok_or_else(|| CliError::Usage("checkpoint has no completed rounds".into()))?;
    for dev in &diag.devices {
        let mut csv = String::new();
        for row in &dev.similarity {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(csv, "{}", line.join(","));
        }
        let name = format!("similarity_round{}_device{}.csv", diag.round, dev.device_id);
        write_out(&out.join(name), &csv)?;
    }
    Ok(())
}

pub fn cmd_inspect(args: InspectArgs) -> CliResult {
    let manifest = read_manifest(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let last = || {
        manifest
            .records
            .last()
            .ok_or_else(|| CliError::Usage("checkpoint has no completed rounds".into()))
    };
    match args.what {
        What::Similarity => export_similarity(&manifest, &args.out)?,
        What::Grouping => {
            let rec = last()?;
            let export = GroupingExport {
                round: rec.round,
                devices: rec
                    .devices
                    .iter()
                    .map(|d| DeviceGroups {
                        device_id: d.device_id,
                        groups: &d.groups,
                        probabilities: &d.probabilities,
                    })
                    .collect(),
            };
            write_json(&args.out.join("grouping.json"), &export)?;
        }
        What::Plan => {
            let rec = last()?;
            let export = PlanExport {
                round: rec.round,
                devices: rec
                    .devices
                    .iter()
                    .map(|d| DevicePlan {
                        device_id: d.device_id,
                        affordable_units: d.affordable_units,
                        plan: &d.plan,
                    })
                    .collect(),
            };
            write_json(&args.out.join("plan.json"), &export)?;
        }
        What::Frequency => {
            let report = layer_frequency_report(&manifest.records)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write_json(&args.out.join("frequency.json"), &report)?;
        }
    }
    Ok(())
}
