//! Federated orchestration: fleet construction from memory budgets, per-round
//! device work (similarity probe, strategy dispatch, local fine-tuning),
//! server-side stacking aggregation, and held-out evaluation.
//!
//! Every source of randomness derives from the experiment seed through fixed
//! tags, and devices within a round run in parallel with results consumed in
//! device-id order, so a config + seed pair fully determines the output.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate_unit, data_weights, fold_and_reset, AggError, DeviceUpdate, ServerState,
    TargetUpdate, UnitAggregation, UnitUpdate,
};
use crate::data::{
    eval_set, partition_data, CorpusSpec, DataError, DataScheme, Shard,
};
use crate::grouping::{partition_units, GroupingError};
use crate::memory::{MemoryError, MemoryModel};
use crate::model::{
    forward, init_model, local_finetune, Batch, CosineSchedule, Model, ModelConfig, ModelError,
    TargetMatrix,
};
use crate::records::{
    AggregationSummary, DeviceRoundRecord, ExperimentSummary, RoundRecord,
};
use crate::rng::{derive, seeded};
use crate::selection::{
    baseline_select, importance_scores, sample_representatives, selection_probabilities,
    BaselineKind, SelectionError,
};
use crate::similarity::{build_similarity, SimilarityError, SimilarityMatrix};
use crate::units::{assemble_submodel, PruneMode, SubmodelPlan, UnitError, UnitId};

/// Seed-derivation tags. Every random stream in an experiment hangs off the
/// experiment seed through one of these, so streams never collide.
pub const SEED_DATA: u64 = 1;
pub const SEED_MODEL: u64 = 2;
pub const SEED_BUDGET: u64 = 3;
pub const SEED_PARTICIPANTS: u64 = 4;
pub const SEED_DEVICE: u64 = 5;
pub const SEED_FOLD: u64 = 6;
pub const SEED_EVAL: u64 = 7;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("no device can afford even a one-unit submodel")]
    NoEligibleDevices,
    #[error("device {device} assembled a plan exceeding its own budget")]
    InfeasiblePlan { device: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Agg(#[from] AggError),
}

/// Submodel construction strategy. `Fedpruner` groups and samples whole
/// layers; `FedprunerPlus` does the same over MHA/FFN components; the rest
/// are pruning baselines plus the no-pruning control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedpruner,
    FedprunerPlus,
    Random,
    Middle,
    Norm,
    Rm,
    Bi,
    Deep,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Fedpruner,
        Strategy::FedprunerPlus,
        Strategy::Random,
        Strategy::Middle,
        Strategy::Norm,
        Strategy::Rm,
        Strategy::Bi,
        Strategy::Deep,
        Strategy::Full,
    ];

    /// The unit granularity this strategy prunes at. Only the component
    /// variant works on MHA/FFN units; `Full` adapts to either mode.
    pub fn mode(self) -> PruneMode {
        match self {
            Strategy::FedprunerPlus => PruneMode::Component,
            _ => PruneMode::Layer,
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Strategy::Random => Some(BaselineKind::Random),
            Strategy::Middle => Some(BaselineKind::Middle),
            Strategy::Norm => Some(BaselineKind::Norm),
            Strategy::Rm => Some(BaselineKind::Rm),
            Strategy::Bi => Some(BaselineKind::Bi),
            Strategy::Deep => Some(BaselineKind::Deep),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedpruner => "fedpruner",
            Strategy::FedprunerPlus => "fedpruner_plus",
            Strategy::Random => "random",
            Strategy::Middle => "middle",
            Strategy::Norm => "norm",
            Strategy::Rm => "rm",
            Strategy::Bi => "bi",
            Strategy::Deep => "deep",
            Strategy::Full => "full",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

/// Per-device strategy override, e.g. to pin one device to `full` as a
/// control inside a pruning experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyOverride {
    pub device: usize,
    pub strategy: Strategy,
}

/// How device memory budgets are assigned. `UniformUnits` draws a layer
/// count uniformly from `min_layers..=max_layers` per device and prices it;
/// `Bytes` lists one explicit budget per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BudgetSpec {
    UniformUnits { min_layers: usize, max_layers: usize },
    Bytes { values: Vec<f64> },
}

fn default_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        n_layers: 12,
        max_seq: 32,
        lora_rank: 4,
        lora_alpha: 8.0,
    }
}

/// Full experiment description. Serde-complete with desk-scale defaults, so
/// `{}` is a valid config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub memory: MemoryModel,
    pub fleet_size: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub local_batch: usize,
    pub base_lr: f64,
    pub floor_lr: f64,
    pub strategy: Strategy,
    pub scheme: DataScheme,
    pub seed: u64,
    pub budgets: BudgetSpec,
    pub eval_sequences: usize,
    pub overrides: Vec<StrategyOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: default_model(),
            corpus: CorpusSpec::default(),
            memory: MemoryModel::default(),
            fleet_size: 20,
            participation: 0.10,
            rounds: 30,
            local_steps: 10,
            local_batch: 16,
            base_lr: 3e-2,
            floor_lr: 3e-3,
            strategy: Strategy::Fedpruner,
            scheme: DataScheme::Iid,
            seed: 0,
            budgets: BudgetSpec::UniformUnits { min_layers: 3, max_layers: 12 },
            eval_sequences: 64,
            overrides: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// The (batch, input length) shape every memory estimate in this
    /// experiment prices: one local training step.
    pub fn memory_shape(&self) -> (usize, usize) {
        (self.local_batch, self.corpus.seq_tokens - 1)
    }

    pub fn mode(&self) -> PruneMode {
        self.strategy.mode()
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |msg: String| Err(FedError::Config(msg));
        self.model.validate()?;
        self.corpus.validate(self.fleet_size)?;
        self.memory.validate()?;
        if self.fleet_size < 1 {
            return bad("fleet_size must be >= 1".into());
        }
        if !self.participation.is_finite() || self.participation <= 0.0 || self.participation > 1.0
        {
            return bad(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.local_steps < 1 {
            return bad("local_steps must be >= 1".into());
        }
        if self.local_batch < 1 {
            return bad("local_batch must be >= 1".into());
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !self.floor_lr.is_finite() || self.floor_lr < 0.0 || self.floor_lr > self.base_lr {
            return bad(format!(
                "floor_lr must lie in [0, base_lr], got {} vs {}",
                self.floor_lr, self.base_lr
            ));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return bad(format!(
                "corpus vocab {} != model vocab {}",
                self.corpus.vocab_size, self.model.vocab_size
            ));
        }
        if self.corpus.seq_tokens - 1 > self.model.max_seq {
            return bad(format!(
                "sequences feed {} input positions but the model caps at {}",
                self.corpus.seq_tokens - 1,
                self.model.max_seq
            ));
        }
        if self.eval_sequences < 1 {
            return bad("eval_sequences must be >= 1".into());
        }
        match &self.budgets {
            BudgetSpec::UniformUnits { min_layers, max_layers } => {
                if *min_layers < 1 || min_layers > max_layers || *max_layers > self.model.n_layers {
                    return bad(format!(
                        "uniform budget range {min_layers}..={max_layers} must sit in 1..={}",
                        self.model.n_layers
                    ));
                }
            }
            BudgetSpec::Bytes { values } => {
                if values.len() != self.fleet_size {
                    return bad(format!(
                        "budget list has {} entries for {} devices",
                        values.len(),
                        self.fleet_size
                    ));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
                    return bad(format!("budgets must be finite and positive, got {v}"));
                }
            }
        }
        let mode = self.mode();
        let mut seen = std::collections::BTreeSet::new();
        for ov in &self.overrides {
            if ov.device >= self.fleet_size {
                return bad(format!(
                    "override device {} outside fleet 0..{}",
                    ov.device, self.fleet_size
                ));
            }
            if !seen.insert(ov.device) {
                return bad(format!("duplicate override for device {}", ov.device));
            }
            if ov.strategy != Strategy::Full && ov.strategy.mode() != mode {
                return bad(format!(
                    "override strategy {} prunes {:?} units but the experiment runs {:?}",
                    ov.strategy,
                    ov.strategy.mode(),
                    mode
                ));
            }
        }
        Ok(())
    }
}

/// One simulated device: identity, budget, local data, optional strategy pin.
#[derive(Debug, Clone)]
pub struct DeviceProfile {
    pub id: usize,
    pub memory_budget: f64,
    pub shard: Shard,
    pub strategy_override: Option<Strategy>,
}

/// A profiled device plus its affordability verdict. `affordable` is the
/// unit count (layers, or components in component mode); `None` means the
/// device is excluded and never sampled.
#[derive(Debug, Clone)]
pub struct FleetDevice {
    pub profile: DeviceProfile,
    pub affordable: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    pub devices: Vec<FleetDevice>,
    /// Device ids with `affordable` set, ascending.
    pub eligible: Vec<usize>,
}

impl Fleet {
    pub fn excluded(&self) -> Vec<usize> {
        self.devices
            .iter()
            .filter(|d| d.affordable.is_none())
            .map(|d| d.profile.id)
            .collect()
    }
}

/// Number of devices sampled per round.
pub fn participant_count(participation: f64, eligible: usize) -> usize {
    ((participation * eligible as f64).ceil() as usize).min(eligible)
}

/// Partitions the corpus, assigns budgets, and runs the affordability check
/// for every device. Devices that cannot fit one unit (or, under a `full`
/// strategy, the whole model) are excluded.
pub fn build_fleet(cfg: &ExperimentConfig) -> Result<Fleet, FedError> {
    let shards = partition_data(
        &cfg.corpus,
        cfg.fleet_size,
        &cfg.scheme,
        derive(cfg.seed, &[SEED_DATA]),
    )?;
    let mode = cfg.mode();
    let (batch, seq) = cfg.memory_shape();
    let max_units = match mode {
        PruneMode::Layer => cfg.model.n_layers,
        PruneMode::Component => 2 * cfg.model.n_layers,
    };

    let mut devices = Vec::with_capacity(cfg.fleet_size);
    let mut eligible = Vec::new();
    for (id, shard) in shards.into_iter().enumerate() {
        let memory_budget = match &cfg.budgets {
            BudgetSpec::UniformUnits { min_layers, max_layers } => {
                let mut rng = seeded(derive(cfg.seed, &[SEED_BUDGET, id as u64]));
                let layers = rng.gen_range(*min_layers..=*max_layers);
                cfg.memory.budget_for_units(&cfg.model, mode, layers, batch, seq)?
            }
            BudgetSpec::Bytes { values } => values[id],
        };
        let strategy_override = cfg
            .overrides
            .iter()
            .find(|ov| ov.device == id)
            .map(|ov| ov.strategy);
        let effective = strategy_override.unwrap_or(cfg.strategy);
        let affordable =
            match cfg.memory.affordable_units(&cfg.model, mode, memory_budget, batch, seq) {
                Ok(k) if effective == Strategy::Full && k < max_units => None,
                Ok(k) => Some(k),
                Err(MemoryError::Excluded) => None,
                Err(e) => return Err(e.into()),
            };
        if affordable.is_some() {
            eligible.push(id);
        }
        devices.push(FleetDevice {
            profile: DeviceProfile { id, memory_budget, shard, strategy_override },
            affordable,
        });
    }
    Ok(Fleet { devices, eligible })
}

/// Mean token cross-entropy and perplexity of the model on a sequence set.
pub fn evaluate(
    model: &Model,
    sequences: &[Vec<u32>],
    batch_size: usize,
) -> Result<(f64, f64), FedError> {
    if sequences.is_empty() {
        return Err(FedError::Config("evaluation needs at least one sequence".into()));
    }
    if batch_size == 0 {
        return Err(FedError::Config("evaluation batch_size must be >= 1".into()));
    }
    let plan = SubmodelPlan::full(model.cfg.n_layers, PruneMode::Layer);
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for chunk in sequences.chunks(batch_size) {
        let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::from_sequences(&refs)?;
        let pass = forward(model, &plan, &batch, false)?;
        let vocab = model.cfg.vocab_size;
        for row in 0..batch.tokens() {
            let mut max = f64::NEG_INFINITY;
            for v in 0..vocab {
                max = max.max(pass.logits.get(row, v));
            }
            let mut sum = 0.0;
            for v in 0..vocab {
                sum += (pass.logits.get(row, v) - max).exp();
            }
            let lse = max + sum.ln();
            loss_sum += lse - pass.logits.get(row, batch.target_at(row) as usize);
        }
        tokens += batch.tokens();
    }
    let loss = loss_sum / tokens as f64;
    Ok((loss, loss.exp()))
}

/// Per-participant probe telemetry kept out of the round record: the full
/// similarity matrix and its first off-diagonal, for checkpoint inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceDiagnostics {
    pub device_id: usize,
    pub similarity: Vec<Vec<f64>>,
    pub adjacent: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub devices: Vec<DeviceDiagnostics>,
}

struct DeviceWork {
    record: DeviceRoundRecord,
    diagnostics: DeviceDiagnostics,
    update: DeviceUpdate,
}

fn similarity_rows(sim: &SimilarityMatrix) -> Vec<Vec<f64>> {
    let n = sim.units();
    (0..n).map(|i| (0..n).map(|j| sim.w.get(i, j)).collect()).collect()
}

/// One device's round: probe activations, pick a plan under its strategy and
/// unit budget, fine-tune locally, and package the adapter update.
fn device_round(
    cfg: &ExperimentConfig,
    schedule: &CosineSchedule,
    global: &Model,
    device: &FleetDevice,
    round: usize,
) -> Result<DeviceWork, FedError> {
    let id = device.profile.id;
    let affordable = device
        .affordable
        .expect("sampled devices are eligible by construction");
    let strategy = device.profile.strategy_override.unwrap_or(cfg.strategy);
    let mode = cfg.mode();
    let n_layers = cfg.model.n_layers;
    let n_units = match mode {
        PruneMode::Layer => n_layers,
        PruneMode::Component => 2 * n_layers,
    };
    let shard = &device.profile.shard;

    let device_seed = derive(cfg.seed, &[SEED_DEVICE, round as u64, id as u64]);
    let probe_seed = derive(device_seed, &[0]);
    let select_seed = derive(device_seed, &[1]);
    let tune_seed = derive(device_seed, &[2]);

    // Probe: one training-shaped batch through the full model, capturing
    // each unit's output for the similarity graph.
    let mut probe_rng = seeded(probe_seed);
    let idxs: Vec<usize> =
        (0..cfg.local_batch).map(|_| probe_rng.gen_range(0..shard.len())).collect();
    let seqs: Vec<&[u32]> = idxs.iter().map(|&i| shard.sequences[i].as_slice()).collect();
    let probe_batch = Batch::from_sequences(&seqs)?;
    let full_plan = SubmodelPlan::full(n_layers, mode);
    let pass = forward(global, &full_plan, &probe_batch, true)?;
    let acts = pass.activations.expect("capture requested");
    let sim = build_similarity(&acts)?;

    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut probabilities: Vec<Vec<f64>> = Vec::new();
    let plan = if strategy == Strategy::Full {
        full_plan
    } else if let Some(kind) = strategy.baseline() {
        let kept = baseline_select(kind, n_units, affordable, &acts, &sim, select_seed)?;
        assemble_submodel(&kept, mode, n_layers)?
    } else {
        let grouping = partition_units(&sim, affordable, derive(select_seed, &[0]))?;
        let scores = importance_scores(&sim);
        let sel = selection_probabilities(&scores, &grouping, mode);
        let sel = sample_representatives(&sel, derive(select_seed, &[1]));
        for g in &sel.groups {
            let labels = g
                .members
                .iter()
                .map(|&u| UnitId::from_flat(mode, u, n_layers).map(|id| id.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            groups.push(labels);
            probabilities.push(g.probabilities.clone());
        }
        assemble_submodel(&sel.chosen_units(), mode, n_layers)?
    };

    let (batch, seq) = cfg.memory_shape();
    let estimate = cfg.memory.estimate(&cfg.model, &plan, batch, seq);
    if estimate > device.profile.memory_budget {
        return Err(FedError::InfeasiblePlan { device: id });
    }

    let mut local = global.clone();
    let outcome = local_finetune(
        &mut local,
        &plan,
        &shard.sequences,
        cfg.local_steps,
        schedule,
        round * cfg.local_steps,
        cfg.local_batch,
        tune_seed,
    )?;

    let units = plan
        .units
        .iter()
        .map(|&unit| UnitUpdate {
            unit,
            targets: TargetMatrix::for_part(unit.part)
                .iter()
                .map(|&t| {
                    let ad = local.adapters.layers[unit.layer - 1].get(t);
                    TargetUpdate { target: t, a: ad.a.clone(), b: ad.b.clone() }
                })
                .collect(),
        })
        .collect();

    Ok(DeviceWork {
        record: DeviceRoundRecord {
            device_id: id,
            shard_size: shard.len(),
            affordable_units: affordable,
            groups,
            probabilities,
            plan: plan.unit_labels(),
            losses: outcome.losses,
        },
        diagnostics: DeviceDiagnostics {
            device_id: id,
            similarity: similarity_rows(&sim),
            adjacent: sim.adjacent.clone(),
        },
        update: DeviceUpdate { device_id: id, shard_size: shard.len(), units },
    })
}

/// One communication round: sample participants, run their device work in
/// parallel, stack every unit's contributions, fold into the global model,
/// and evaluate.
pub fn run_round(
    state: &mut ServerState,
    cfg: &ExperimentConfig,
    fleet: &Fleet,
    schedule: &CosineSchedule,
    round: usize,
    eval: &Shard,
) -> Result<(RoundRecord, RoundDiagnostics), FedError> {
    if fleet.eligible.is_empty() {
        return Err(FedError::NoEligibleDevices);
    }
    let m = participant_count(cfg.participation, fleet.eligible.len());
    let mut rng = seeded(derive(cfg.seed, &[SEED_PARTICIPANTS, round as u64]));
    let mut participants: Vec<usize> = rand::seq::index::sample(&mut rng, fleet.eligible.len(), m)
        .iter()
        .map(|i| fleet.eligible[i])
        .collect();
    participants.sort_unstable();

    let global = &state.model;
    let works: Vec<DeviceWork> = participants
        .par_iter()
        .map(|&id| device_round(cfg, schedule, global, &fleet.devices[id], round))
        .collect::<Result<Vec<_>, _>>()?;

    let mode = cfg.mode();
    let all_units = SubmodelPlan::full(cfg.model.n_layers, mode).units;
    let mut aggregations: Vec<(UnitId, UnitAggregation)> = Vec::with_capacity(all_units.len());
    let mut updated = Vec::new();
    let mut persisted = Vec::new();
    for &unit in &all_units {
        let contributors: Vec<&DeviceWork> = works
            .iter()
            .filter(|w| w.update.units.iter().any(|uu| uu.unit == unit))
            .collect();
        let agg = if contributors.is_empty() {
            persisted.push(unit.to_string());
            UnitAggregation::Persisted
        } else {
            updated.push(unit.to_string());
            let sizes: Vec<usize> = contributors.iter().map(|w| w.update.shard_size).collect();
            let weights = data_weights(&sizes)?;
            let entries: Vec<(usize, f64, &UnitUpdate)> = contributors
                .iter()
                .zip(weights.iter())
                .map(|(w, &lambda)| {
                    let uu = w
                        .update
                        .units
                        .iter()
                        .find(|uu| uu.unit == unit)
                        .expect("filtered on containment");
                    (w.update.device_id, lambda, uu)
                })
                .collect();
            aggregate_unit(&entries)?
        };
        aggregations.push((unit, agg));
    }
    fold_and_reset(state, &aggregations, derive(cfg.seed, &[SEED_FOLD, round as u64]))?;

    let (eval_loss, eval_perplexity) = evaluate(&state.model, &eval.sequences, cfg.local_batch)?;

    let mut devices = Vec::with_capacity(works.len());
    let mut diags = Vec::with_capacity(works.len());
    for w in works {
        devices.push(w.record);
        diags.push(w.diagnostics);
    }
    Ok((
        RoundRecord {
            round,
            participants,
            devices,
            aggregation: AggregationSummary { updated, persisted },
            eval_loss,
            eval_perplexity,
        },
        RoundDiagnostics { round, devices: diags },
    ))
}

/// Everything a finished experiment produces: the per-round records, the
/// probe diagnostics backing checkpoint inspection, the summary, the final
/// server state, and the fleet it ran on.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub summary: ExperimentSummary,
    pub state: ServerState,
    pub fleet: Fleet,
}

/// Runs the configured number of rounds from a fresh seeded model. With
/// `rounds = 0` this reduces to evaluating the untrained model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, FedError> {
    cfg.validate()?;
    let fleet = build_fleet(cfg)?;
    let model = init_model(&cfg.model, derive(cfg.seed, &[SEED_MODEL]))?;
    let mut state = ServerState::new(model);
    let eval = eval_set(&cfg.corpus, cfg.eval_sequences, derive(cfg.seed, &[SEED_EVAL]))?;
    let schedule = CosineSchedule {
        base: cfg.base_lr,
        floor: cfg.floor_lr,
        total_steps: cfg.rounds * cfg.local_steps,
    };

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut diagnostics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let (rec, diag) = run_round(&mut state, cfg, &fleet, &schedule, round, &eval)?;
        records.push(rec);
        diagnostics.push(diag);
    }

    let (final_eval_loss, final_perplexity) = match records.last() {
        Some(rec) => (rec.eval_loss, rec.eval_perplexity),
        None => evaluate(&state.model, &eval.sequences, cfg.local_batch)?,
    };
    let summary = ExperimentSummary {
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        rounds: cfg.rounds,
        excluded_devices: fleet.excluded(),
        round_eval_losses: records.iter().map(|r| r.eval_loss).collect(),
        final_eval_loss,
        final_perplexity,
    };
    Ok(ExperimentOutput { records, diagnostics, summary, state, fleet })
}
