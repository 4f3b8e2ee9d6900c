//! Local fine-tuning: Adam over the plan units' LoRA parameters with a
//! cosine learning-rate schedule positioned on the global step horizon.
//! Base weights and non-plan adapters are untouched by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::rng;
use crate::units::SubmodelPlan;

use super::backward::{loss_and_grads, LoraGrads};
use super::forward::Batch;
use super::{Model, ModelError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Cosine decay from `base` to `floor` over `total_steps` global steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Per-step training losses of one local fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub losses: Vec<f64>,
}

struct AdamPair {
    m: DenseMatrix,
    v: DenseMatrix,
}

impl AdamPair {
    fn like(shape: &DenseMatrix) -> Self {
        AdamPair {
            m: DenseMatrix::zeros(shape.rows(), shape.cols()),
            v: DenseMatrix::zeros(shape.rows(), shape.cols()),
        }
    }

    fn update(&mut self, param: &mut DenseMatrix, grad: &DenseMatrix, lr: f64, t: usize) {
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let ms = self.m.values_mut();
        let vs = self.v.values_mut();
        let ps = param.values_mut();
        let gs = grad.values();
        for i in 0..ps.len() {
            let g = gs[i];
            ms[i] = BETA1 * ms[i] + (1.0 - BETA1) * g;
            vs[i] = BETA2 * vs[i] + (1.0 - BETA2) * g * g;
            let mhat = ms[i] / bc1;
            let vhat = vs[i] / bc2;
            ps[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Runs `steps` Adam steps on the plan units' adapters, sampling one batch
/// per step from the shard (uniform with replacement, seeded). Returns the
/// per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn local_finetune(
    model: &mut Model,
    plan: &SubmodelPlan,
    shard: &[Vec<u32>],
    steps: usize,
    schedule: &CosineSchedule,
    step_offset: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FinetuneOutcome, ModelError> {
    if shard.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    if batch_size == 0 {
        return Err(ModelError::BadBatch("batch_size must be >= 1".into()));
    }

    let mut rng = rng::seeded(seed);
    let mut losses = Vec::with_capacity(steps);
    let mut state: Option<Vec<Vec<(AdamPair, AdamPair)>>> = None;

    for step in 0..steps {
        let idxs: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..shard.len())).collect();
        let seqs: Vec<&[u32]> = idxs.iter().map(|&i| shard[i].as_slice()).collect();
        let batch = Batch::from_sequences(&seqs)?;

        let (loss, grads) = loss_and_grads(model, plan, &batch)?;
        losses.push(loss);

        let st = state.get_or_insert_with(|| {
            grads
                .units
                .iter()
                .map(|u| {
                    u.targets
                        .iter()
                        .map(|tg| (AdamPair::like(&tg.da), AdamPair::like(&tg.db)))
                        .collect()
                })
                .collect()
        });
        apply(model, &grads, st, schedule.lr_at(step_offset + step), step + 1);
    }

    Ok(FinetuneOutcome { losses })
}

fn apply(
    model: &mut Model,
    grads: &LoraGrads,
    state: &mut [Vec<(AdamPair, AdamPair)>],
    lr: f64,
    t: usize,
) {
    for (unit_grads, unit_state) in grads.units.iter().zip(state.iter_mut()) {
        let layer0 = unit_grads.unit.layer - 1;
        for (tg, (sa, sb)) in unit_grads.targets.iter().zip(unit_state.iter_mut()) {
            let ad = model.adapters.layers[layer0].get_mut(tg.target);
            sa.update(&mut ad.a, &tg.da, lr, t);
            sb.update(&mut ad.b, &tg.db, lr, t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tests::tiny_cfg};
    use crate::units::{PruneMode, UnitId};
    use std::sync::Arc;

    fn schedule() -> CosineSchedule {
        CosineSchedule { base: 5e-3, floor: 5e-4, total_steps: 200 }
    }

    fn markovish_shard(vocab: u32, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
        // Deterministic cyclic sequences: next = current + 1 mod vocab, with
        // per-sequence start offsets; trivially learnable structure.
        (0..n)
            .map(|i| {
                let start = (seed as u32 + i as u32 * 3) % vocab;
                (0..=len as u32).map(|t| (start + t) % vocab).collect()
            })
            .collect()
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone_decay() {
        let s = schedule();
        assert!((s.lr_at(0) - s.base).abs() <= 1e-15);
        assert!((s.lr_at(s.total_steps) - s.floor).abs() <= 1e-15);
        assert!((s.lr_at(10 * s.total_steps) - s.floor).abs() <= 1e-15);
        for t in 1..=s.total_steps {
            assert!(s.lr_at(t) <= s.lr_at(t - 1) + 1e-15);
        }
    }

    #[test]
    fn zero_steps_is_a_noop() {
        let cfg = tiny_cfg();
        let mut m = init_model(&cfg, 1).unwrap();
        let before = m.adapters.clone();
        let shard = markovish_shard(cfg.vocab_size as u32, 4, cfg.max_seq, 0);
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let out = local_finetune(&mut m, &plan, &shard, 0, &schedule(), 0, 2, 7).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(m.adapters, before);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let cfg = tiny_cfg();
        let mut m = init_model(&cfg, 1).unwrap();
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        assert!(matches!(
            local_finetune(&mut m, &plan, &[], 1, &schedule(), 0, 2, 7),
            Err(ModelError::EmptyShard)
        ));
    }

    #[test]
    fn base_and_non_plan_adapters_are_untouched() {
        let cfg = tiny_cfg();
        let mut m = init_model(&cfg, 3).unwrap();
        let base_ptr = Arc::clone(&m.base);
        let before = m.adapters.clone();
        let shard = markovish_shard(cfg.vocab_size as u32, 4, cfg.max_seq, 1);
        let plan = SubmodelPlan { units: vec![UnitId::whole(1)], mode: PruneMode::Layer };
        local_finetune(&mut m, &plan, &shard, 5, &schedule(), 0, 2, 9).unwrap();

        assert!(Arc::ptr_eq(&base_ptr, &m.base));
        // Layer 2 (not in the plan) keeps bit-identical adapters.
        assert_eq!(m.adapters.layers[1], before.layers[1]);
        // Layer 1 moved.
        assert_ne!(m.adapters.layers[0], before.layers[0]);
    }

    #[test]
    fn training_reduces_loss_on_learnable_shard() {
        let cfg = tiny_cfg();
        let mut wins = 0;
        for seed in 0..5 {
            let mut m = init_model(&cfg, 50 + seed).unwrap();
            let shard = markovish_shard(cfg.vocab_size as u32, 6, cfg.max_seq, seed);
            let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
            let out =
                local_finetune(&mut m, &plan, &shard, 200, &schedule(), 0, 4, seed).unwrap();
            let first = out.losses[0];
            let last = *out.losses.last().unwrap();
            if last < first {
                wins += 1;
            }
        }
        assert!(wins >= 4, "loss decreased in only {wins}/5 seeds");
    }

    #[test]
    fn finetune_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let shard = markovish_shard(cfg.vocab_size as u32, 4, cfg.max_seq, 2);
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let run = |seed: u64| {
            let mut m = init_model(&cfg, 17).unwrap();
            let out = local_finetune(&mut m, &plan, &shard, 8, &schedule(), 0, 3, seed).unwrap();
            (out.losses, m.adapters)
        };
        let (l1, a1) = run(42);
        let (l2, a2) = run(42);
        assert_eq!(l1, l2);
        assert_eq!(a1, a2);
        let (l3, _) = run(43);
        assert_ne!(l1, l3);
    }
}
