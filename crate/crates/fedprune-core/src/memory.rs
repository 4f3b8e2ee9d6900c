//! Analytic device-memory model. Costs are exact byte counts under a simple
//! accounting: every resident parameter costs `bytes_per_param`, trainable
//! (LoRA) parameters additionally pay `optimizer_multiplier` for their Adam
//! moments, and each resident unit pays for the activation buffers one
//! training step keeps alive. Affordability and plan estimates share one
//! accumulation path so budget boundaries are bit-exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::units::{PruneMode, SubmodelPlan, UnitPart};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("invalid memory model: {0}")]
    InvalidModel(String),
    #[error("device cannot fit even a single unit and is excluded")]
    Excluded,
}

/// Bytes-per-parameter accounting with an optimizer surcharge on trainable
/// parameters. Activations are counted at the same width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryModel {
    pub bytes_per_param: f64,
    pub optimizer_multiplier: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel { bytes_per_param: 8.0, optimizer_multiplier: 2.0 }
    }
}

/// Frozen parameters in one unit's base matrices plus norm gains.
fn base_params(cfg: &ModelConfig, part: UnitPart) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let mha = 4 * d * d + d;
    let ffn = 2 * d * f + d;
    match part {
        UnitPart::Whole => mha + ffn,
        UnitPart::Mha => mha,
        UnitPart::Ffn => ffn,
    }
}

/// Trainable LoRA parameters attached to one unit.
fn lora_params(cfg: &ModelConfig, part: UnitPart) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let r = cfg.lora_rank;
    let mha = 4 * r * 2 * d;
    let ffn = 2 * r * (d + f);
    match part {
        UnitPart::Whole => mha + ffn,
        UnitPart::Mha => mha,
        UnitPart::Ffn => ffn,
    }
}

/// f64 values one training step retains per unit: pre-norm input, normed
/// input, projection outputs, attention probabilities, LoRA intermediates,
/// and the sublayer output.
fn activation_floats(cfg: &ModelConfig, part: UnitPart, batch: usize, seq: usize) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let r = cfg.lora_rank;
    let h = cfg.n_heads;
    let bs = batch * seq;
    let mha = 7 * bs * d + batch * h * seq * seq + 4 * bs * r;
    let ffn = 3 * bs * d + 2 * bs * f + 2 * bs * r;
    match part {
        UnitPart::Whole => mha + ffn,
        UnitPart::Mha => mha,
        UnitPart::Ffn => ffn,
    }
}

impl MemoryModel {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !self.bytes_per_param.is_finite() || self.bytes_per_param <= 0.0 {
            return Err(MemoryError::InvalidModel(
                "bytes_per_param must be finite and positive".into(),
            ));
        }
        if !self.optimizer_multiplier.is_finite() || self.optimizer_multiplier < 0.0 {
            return Err(MemoryError::InvalidModel(
                "optimizer_multiplier must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Cost of the always-resident pieces: embedding, head, final norm gain.
    pub fn fixed_cost(&self, cfg: &ModelConfig) -> f64 {
        let params = cfg.vocab_size * cfg.d_model + cfg.d_model * cfg.vocab_size + cfg.d_model;
        params as f64 * self.bytes_per_param
    }

    /// Cost of keeping one unit resident and trainable for a step of the
    /// given batch shape.
    pub fn unit_cost(&self, cfg: &ModelConfig, part: UnitPart, batch: usize, seq: usize) -> f64 {
        let base = base_params(cfg, part) as f64 * self.bytes_per_param;
        let lora = lora_params(cfg, part) as f64
            * self.bytes_per_param
            * (1.0 + self.optimizer_multiplier);
        let act = activation_floats(cfg, part, batch, seq) as f64 * self.bytes_per_param;
        base + lora + act
    }

    /// Estimated bytes to fine-tune the given submodel.
    pub fn estimate(
        &self,
        cfg: &ModelConfig,
        plan: &SubmodelPlan,
        batch: usize,
        seq: usize,
    ) -> f64 {
        let mut total = self.fixed_cost(cfg);
        for unit in &plan.units {
            total += self.unit_cost(cfg, unit.part, batch, seq);
        }
        total
    }

    /// Largest affordable unit count under `budget_bytes`. Layer mode returns
    /// the layer count K; component mode prices units at the costlier
    /// component and returns the even unit budget 2K, so any K MHA/FFN pairs
    /// fit. Errors with `Excluded` when not even one unit (one pair in
    /// component mode) fits.
    pub fn affordable_units(
        &self,
        cfg: &ModelConfig,
        mode: PruneMode,
        budget_bytes: f64,
        batch: usize,
        seq: usize,
    ) -> Result<usize, MemoryError> {
        self.validate()?;
        let per_unit = match mode {
            PruneMode::Layer => self.unit_cost(cfg, UnitPart::Whole, batch, seq),
            PruneMode::Component => {
                let mha = self.unit_cost(cfg, UnitPart::Mha, batch, seq);
                let ffn = self.unit_cost(cfg, UnitPart::Ffn, batch, seq);
                mha.max(ffn)
            }
        };
        let max_units = match mode {
            PruneMode::Layer => cfg.n_layers,
            PruneMode::Component => 2 * cfg.n_layers,
        };
        // Accumulate exactly as `estimate` does so boundary budgets agree.
        let mut acc = self.fixed_cost(cfg);
        let mut affordable = 0usize;
        for k in 1..=max_units {
            acc += per_unit;
            if acc <= budget_bytes {
                affordable = k;
            } else {
                break;
            }
        }
        match mode {
            PruneMode::Layer => {
                if affordable < 1 {
                    return Err(MemoryError::Excluded);
                }
                Ok(affordable)
            }
            PruneMode::Component => {
                let pairs = affordable / 2;
                if pairs < 1 {
                    return Err(MemoryError::Excluded);
                }
                Ok(2 * pairs)
            }
        }
    }

    /// Smallest budget whose `affordable_units` comes out at exactly `layers`
    /// layers (`2 * layers` units in component mode). Accumulates costs in the
    /// same order as `affordable_units`, so the round trip is bit-exact.
    pub fn budget_for_units(
        &self,
        cfg: &ModelConfig,
        mode: PruneMode,
        layers: usize,
        batch: usize,
        seq: usize,
    ) -> Result<f64, MemoryError> {
        self.validate()?;
        if layers < 1 || layers > cfg.n_layers {
            return Err(MemoryError::InvalidModel(format!(
                "budget_for_units wants 1..={} layers, got {layers}",
                cfg.n_layers
            )));
        }
        let (per_unit, count) = match mode {
            PruneMode::Layer => (self.unit_cost(cfg, UnitPart::Whole, batch, seq), layers),
            PruneMode::Component => {
                let mha = self.unit_cost(cfg, UnitPart::Mha, batch, seq);
                let ffn = self.unit_cost(cfg, UnitPart::Ffn, batch, seq);
                (mha.max(ffn), 2 * layers)
            }
        };
        let mut acc = self.fixed_cost(cfg);
        for _ in 0..count {
            acc += per_unit;
        }
        Ok(acc)
    }
}
