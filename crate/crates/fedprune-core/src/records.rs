//! Experiment telemetry. One `RoundRecord` per federated round, serialized
//! as a JSONL line by the CLI; all maps are ordered so serialization is
//! byte-stable under identical runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RecordsError {
    #[error("no round records given")]
    NoRecords,
}

/// What one participating device did in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRoundRecord {
    pub device_id: usize,
    pub shard_size: usize,
    /// Unit budget the device's memory affords: K whole layers, or 2K
    /// components in component mode.
    pub affordable_units: usize,
    /// Unit labels per group (empty for baseline strategies, which skip
    /// grouping).
    pub groups: Vec<Vec<String>>,
    /// Selection probabilities aligned with `groups`.
    pub probabilities: Vec<Vec<f64>>,
    /// Chosen submodel, ascending unit order.
    pub plan: Vec<String>,
    /// Local training loss per step.
    pub losses: Vec<f64>,
}

/// Which units the server stacked vs persisted in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSummary {
    pub updated: Vec<String>,
    pub persisted: Vec<String>,
}

/// One federated round, start to finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub devices: Vec<DeviceRoundRecord>,
    pub aggregation: AggregationSummary,
    pub eval_loss: f64,
    pub eval_perplexity: f64,
}

/// Final line of a run: config echo plus the loss trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub excluded_devices: Vec<usize>,
    pub round_eval_losses: Vec<f64>,
    pub final_eval_loss: f64,
    pub final_perplexity: f64,
}

/// Unit selection counts, fleet-wide and per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub fleet: BTreeMap<String, usize>,
    pub per_device: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Counts how often each unit appeared in participants' plans.
pub fn layer_frequency_report(records: &[RoundRecord]) -> Result<FrequencyReport, RecordsError> {
    if records.is_empty() {
        return Err(RecordsError::NoRecords);
    }
    let mut fleet: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_device: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for record in records {
        for device in &record.devices {
            let dev = per_device.entry(device.device_id.to_string()).or_default();
            for unit in &device.plan {
                *fleet.entry(unit.clone()).or_insert(0) += 1;
                *dev.entry(unit.clone()).or_insert(0) += 1;
            }
        }
    }
    Ok(FrequencyReport { fleet, per_device })
}
