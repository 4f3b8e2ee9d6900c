//! Server-side stacking aggregation of partial LoRA updates and the
//! between-round rank fold.
//!
//! For a unit touched by devices S = {s₁ < s₂ < …} (sorted by id), the
//! stacked factors are A_st = vconcat(λ_s·A_s) and B_st = hconcat(B_s), so
//! B_st·A_st = Σ λ_s·B_s·A_s without forming any dense product on the
//! device. Units nobody touched persist bit-exactly. The fold then turns
//! each stacked product into a per-matrix additive delta (scaled by the
//! server's LoRA scaling) and reissues fresh rank-r adapters, keeping
//! device-side rank constant across rounds.

use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::model::{AdapterSet, Model, TargetMatrix};
use crate::rng::derive;
use crate::units::UnitId;

/// Seed tag for the post-fold adapter refresh.
const FRESH_ADAPTER_TAG: u64 = 11;

#[derive(Debug, Error, PartialEq)]
pub enum AggError {
    #[error("no shard sizes given")]
    EmptyList,
    #[error("device {0} reports an empty shard")]
    ZeroShard(usize),
    #[error("device {0} appears twice in one unit's contributions")]
    DuplicateDevice(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One target matrix's trained factors from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetUpdate {
    pub target: TargetMatrix,
    /// rank × in
    pub a: DenseMatrix,
    /// out × rank
    pub b: DenseMatrix,
}

/// One unit's trained factors from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitUpdate {
    pub unit: UnitId,
    pub targets: Vec<TargetUpdate>,
}

/// Everything one device ships back after local fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpdate {
    pub device_id: usize,
    pub shard_size: usize,
    pub units: Vec<UnitUpdate>,
}

/// Outcome of aggregating one unit.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitAggregation {
    /// Stacked factors per target, in the unit's target order.
    Stacked { targets: Vec<TargetUpdate> },
    /// No device touched the unit this round.
    Persisted,
}

/// λ_s = |D_s| / Σ|D_s| over the given contributor set.
pub fn data_weights(shard_sizes: &[usize]) -> Result<Vec<f64>, AggError> {
    if shard_sizes.is_empty() {
        return Err(AggError::EmptyList);
    }
    if let Some(pos) = shard_sizes.iter().position(|&s| s == 0) {
        return Err(AggError::ZeroShard(pos));
    }
    let total: usize = shard_sizes.iter().sum();
    Ok(shard_sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Stacks the contributions for one unit. `contributions` pairs each
/// device's id and λ with its update for this unit; order does not matter
/// (sorted by id internally). Empty input persists the unit.
pub fn aggregate_unit(
    contributions: &[(usize, f64, &UnitUpdate)],
) -> Result<UnitAggregation, AggError> {
    if contributions.is_empty() {
        return Ok(UnitAggregation::Persisted);
    }
    let mut sorted: Vec<&(usize, f64, &UnitUpdate)> = contributions.iter().collect();
    sorted.sort_by_key(|(id, _, _)| *id);
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(AggError::DuplicateDevice(pair[0].0));
        }
    }

    let first = sorted[0].2;
    let target_order: Vec<TargetMatrix> = first.targets.iter().map(|t| t.target).collect();
    for &&(id, _, update) in &sorted {
        if update.unit != first.unit {
            return Err(AggError::ShapeMismatch(format!(
                "device {id} update is for unit {}, expected {}",
                update.unit, first.unit
            )));
        }
        let order: Vec<TargetMatrix> = update.targets.iter().map(|t| t.target).collect();
        if order != target_order {
            return Err(AggError::ShapeMismatch(format!(
                "device {id} targets {order:?} do not match {target_order:?}"
            )));
        }
    }

    let mut targets = Vec::with_capacity(target_order.len());
    for (ti, &target) in target_order.iter().enumerate() {
        let in_dim = first.targets[ti].a.cols();
        let out_dim = first.targets[ti].b.rows();
        let mut total_rank = 0usize;
        for &&(id, _, update) in &sorted {
            let tu = &update.targets[ti];
            if tu.a.cols() != in_dim || tu.b.rows() != out_dim {
                return Err(AggError::ShapeMismatch(format!(
                    "device {id} {} factors are {}x{} / {}x{}, expected in {in_dim} out {out_dim}",
                    target.label(),
                    tu.a.rows(),
                    tu.a.cols(),
                    tu.b.rows(),
                    tu.b.cols()
                )));
            }
            if tu.a.rows() != tu.b.cols() {
                return Err(AggError::ShapeMismatch(format!(
                    "device {id} {} ranks disagree: a has {}, b has {}",
                    target.label(),
                    tu.a.rows(),
                    tu.b.cols()
                )));
            }
            total_rank += tu.a.rows();
        }

        let mut a_st = DenseMatrix::zeros(total_rank, in_dim);
        let mut b_st = DenseMatrix::zeros(out_dim, total_rank);
        let mut row0 = 0usize;
        for &&(_, lambda, update) in &sorted {
            let tu = &update.targets[ti];
            let rank = tu.a.rows();
            for r in 0..rank {
                let src = tu.a.row(r);
                let dst = a_st.row_mut(row0 + r);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = lambda * s;
                }
            }
            for o in 0..out_dim {
                let dst = b_st.row_mut(o);
                let src = tu.b.row(o);
                dst[row0..row0 + rank].copy_from_slice(src);
            }
            row0 += rank;
        }
        targets.push(TargetUpdate { target, a: a_st, b: b_st });
    }
    Ok(UnitAggregation::Stacked { targets })
}

/// Global model plus round counter, mutated once per round after the device
/// barrier.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: Model,
    pub round: usize,
}

impl ServerState {
    pub fn new(model: Model) -> Self {
        ServerState { model, round: 0 }
    }
}

/// Folds every stacked unit into the per-matrix effective deltas, then
/// reinitializes all global adapters from the round seed (a fresh Gaussian,
/// b zero), leaving the effective forward function unchanged. Persisted
/// entries are no-ops; duplicate unit entries fold additively.
pub fn fold_and_reset(
    state: &mut ServerState,
    aggregations: &[(UnitId, UnitAggregation)],
    round_seed: u64,
) -> Result<(), AggError> {
    let cfg = state.model.cfg.clone();
    let mut deltas = (*state.model.deltas).clone();
    for (unit, agg) in aggregations {
        let UnitAggregation::Stacked { targets } = agg else { continue };
        if unit.layer < 1 || unit.layer > cfg.n_layers {
            return Err(AggError::ShapeMismatch(format!(
                "unit {unit} outside 1..={}",
                cfg.n_layers
            )));
        }
        for tu in targets {
            let (in_dim, out_dim) = tu.target.dims(&cfg);
            if tu.a.cols() != in_dim || tu.b.rows() != out_dim || tu.a.rows() != tu.b.cols() {
                return Err(AggError::ShapeMismatch(format!(
                    "stacked {} factors for {unit} are {}x{} / {}x{}",
                    tu.target.label(),
                    tu.a.rows(),
                    tu.a.cols(),
                    tu.b.rows(),
                    tu.b.cols()
                )));
            }
            let mut d_io = tu.b.matmul(&tu.a).transpose();
            d_io.scale(cfg.lora_scaling());
            match &mut deltas.layers[unit.layer - 1][tu.target.index()] {
                Some(d) => d.add_scaled(&d_io, 1.0),
                slot => *slot = Some(d_io),
            }
        }
    }
    state.model.set_deltas(deltas);
    state.model.adapters = AdapterSet::init(&cfg, derive(round_seed, &[FRESH_ADAPTER_TAG]));
    state.round += 1;
    Ok(())
}

/// The fold of `agg` that `fold_and_reset` would apply to this unit/target,
/// as a dense in×out delta. Exposed for checkpoint manifests.
pub fn stacked_delta_io(cfg_scaling: f64, tu: &TargetUpdate) -> DenseMatrix {
    let mut d = tu.b.matmul(&tu.a).transpose();
    d.scale(cfg_scaling);
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, Batch, DeltaSet, ModelConfig};
    use crate::rng::seeded;
    use crate::units::{PruneMode, SubmodelPlan};
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 2,
            max_seq: 6,
            lora_rank: 2,
            lora_alpha: 4.0,
        }
    }

    fn rand_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_unit_update<R: Rng>(rng: &mut R, unit: UnitId, rank: usize, c: &ModelConfig) -> UnitUpdate {
        let targets = TargetMatrix::for_part(unit.part)
            .iter()
            .map(|&t| {
                let (i, o) = t.dims(c);
                TargetUpdate { target: t, a: rand_matrix(rng, rank, i), b: rand_matrix(rng, o, rank) }
            })
            .collect();
        UnitUpdate { unit, targets }
    }

    #[test]
    fn data_weights_match_hand_values_and_normalize() {
        assert_eq!(data_weights(&[10, 10]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(data_weights(&[1, 3]).unwrap(), vec![0.25, 0.75]);
        let mut rng = seeded(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..9);
            let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..100)).collect();
            let w = data_weights(&sizes).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(w.iter().all(|&x| x > 0.0));
        }
        assert_eq!(data_weights(&[]), Err(AggError::EmptyList));
        assert_eq!(data_weights(&[3, 0]), Err(AggError::ZeroShard(1)));
    }

    #[test]
    fn single_device_stack_is_its_own_product() {
        let c = cfg();
        let mut rng = seeded(5);
        let u = rand_unit_update(&mut rng, UnitId::whole(1), 2, &c);
        let agg = aggregate_unit(&[(7, 1.0, &u)]).unwrap();
        let UnitAggregation::Stacked { targets } = agg else { panic!("expected stack") };
        for (tu, orig) in targets.iter().zip(&u.targets) {
            assert_eq!(tu.a, orig.a);
            assert_eq!(tu.b, orig.b);
            let product = tu.b.matmul(&tu.a);
            let direct = orig.b.matmul(&orig.a);
            assert_eq!(product, direct);
        }
    }

    #[test]
    fn two_equal_devices_average_against_dense_oracle() {
        let c = cfg();
        let mut rng = seeded(6);
        let u1 = rand_unit_update(&mut rng, UnitId::ffn(2), 2, &c);
        let u2 = rand_unit_update(&mut rng, UnitId::ffn(2), 2, &c);
        let agg = aggregate_unit(&[(0, 0.5, &u1), (1, 0.5, &u2)]).unwrap();
        let UnitAggregation::Stacked { targets } = agg else { panic!("expected stack") };
        for (ti, tu) in targets.iter().enumerate() {
            let stacked = tu.b.matmul(&tu.a);
            let mut dense = u1.targets[ti].b.matmul(&u1.targets[ti].a);
            dense.scale(0.5);
            let mut d2 = u2.targets[ti].b.matmul(&u2.targets[ti].a);
            d2.scale(0.5);
            dense.add_scaled(&d2, 1.0);
            let mut diff = stacked;
            diff.add_scaled(&dense, -1.0);
            assert!(diff.max_abs() <= 1e-10);
        }
    }

    #[test]
    fn stacking_identity_heterogeneous_ranks_and_counts() {
        let c = cfg();
        let mut rng = seeded(7);
        for n_dev in 1..=8usize {
            let unit = UnitId::mha(1);
            let updates: Vec<UnitUpdate> = (0..n_dev)
                .map(|_| {
                    let rank = rng.gen_range(1..5);
                    rand_unit_update(&mut rng, unit, rank, &c)
                })
                .collect();
            let sizes: Vec<usize> = (0..n_dev).map(|_| rng.gen_range(1..50)).collect();
            let lambdas = data_weights(&sizes).unwrap();
            let contributions: Vec<(usize, f64, &UnitUpdate)> =
                updates.iter().enumerate().map(|(i, u)| (i, lambdas[i], u)).collect();
            let agg = aggregate_unit(&contributions).unwrap();
            let UnitAggregation::Stacked { targets } = agg else { panic!("expected stack") };
            for (ti, tu) in targets.iter().enumerate() {
                assert_eq!(tu.a.rows(), updates.iter().map(|u| u.targets[ti].a.rows()).sum::<usize>());
                let stacked = tu.b.matmul(&tu.a);
                let (in_dim, out_dim) = tu.target.dims(&c);
                let mut dense = DenseMatrix::zeros(out_dim, in_dim);
                for (i, u) in updates.iter().enumerate() {
                    let mut term = u.targets[ti].b.matmul(&u.targets[ti].a);
                    term.scale(lambdas[i]);
                    dense.add_scaled(&term, 1.0);
                }
                let mut diff = stacked;
                diff.add_scaled(&dense, -1.0);
                assert!(diff.max_abs() <= 1e-10, "devices {n_dev} target {ti}");
            }
        }
    }

    #[test]
    fn empty_contributor_set_persists() {
        assert_eq!(aggregate_unit(&[]).unwrap(), UnitAggregation::Persisted);
    }

    #[test]
    fn contribution_order_does_not_matter() {
        let c = cfg();
        let mut rng = seeded(8);
        let u1 = rand_unit_update(&mut rng, UnitId::whole(2), 3, &c);
        let u2 = rand_unit_update(&mut rng, UnitId::whole(2), 1, &c);
        let u3 = rand_unit_update(&mut rng, UnitId::whole(2), 2, &c);
        let fwd = aggregate_unit(&[(1, 0.2, &u1), (2, 0.3, &u2), (5, 0.5, &u3)]).unwrap();
        let rev = aggregate_unit(&[(5, 0.5, &u3), (1, 0.2, &u1), (2, 0.3, &u2)]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn mismatched_shapes_and_duplicate_devices_are_rejected() {
        let c = cfg();
        let mut rng = seeded(9);
        let good = rand_unit_update(&mut rng, UnitId::ffn(1), 2, &c);
        let mut bad = good.clone();
        bad.targets[0].a = rand_matrix(&mut rng, 2, 7);
        assert!(matches!(
            aggregate_unit(&[(0, 0.5, &good), (1, 0.5, &bad)]),
            Err(AggError::ShapeMismatch(_))
        ));
        let mut rank_skew = good.clone();
        rank_skew.targets[1].b = rand_matrix(&mut rng, c.d_model, 3);
        assert!(matches!(
            aggregate_unit(&[(0, 1.0, &rank_skew)]),
            Err(AggError::ShapeMismatch(_))
        ));
        let other_unit = rand_unit_update(&mut rng, UnitId::ffn(2), 2, &c);
        assert!(matches!(
            aggregate_unit(&[(0, 0.5, &good), (1, 0.5, &other_unit)]),
            Err(AggError::ShapeMismatch(_))
        ));
        assert_eq!(
            aggregate_unit(&[(3, 0.5, &good), (3, 0.5, &good)]),
            Err(AggError::DuplicateDevice(3))
        );
    }

    fn random_batch<R: Rng>(rng: &mut R, c: &ModelConfig, batch: usize, seq: usize) -> Batch {
        let ids: Vec<u32> =
            (0..batch * seq).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();
        Batch::new(batch, seq, ids.clone(), ids).unwrap()
    }

    #[test]
    fn fold_is_forward_equivalent_to_stacked_adapters() {
        let c = cfg();
        let mut rng = seeded(10);
        let server = init_model(&c, 21).unwrap();
        let plan = SubmodelPlan::full(c.n_layers, PruneMode::Layer);

        // Two devices' trained factors for layer 1.
        let unit = UnitId::whole(1);
        let u1 = rand_unit_update(&mut rng, unit, c.lora_rank, &c);
        let u2 = rand_unit_update(&mut rng, unit, c.lora_rank, &c);
        let lambdas = data_weights(&[30, 10]).unwrap();
        let agg = aggregate_unit(&[(0, lambdas[0], &u1), (1, lambdas[1], &u2)]).unwrap();
        let UnitAggregation::Stacked { targets } = agg.clone() else { panic!() };

        // Pre-fold reference: install the stacked factors as live adapters.
        let mut pre = server.clone();
        for tu in &targets {
            let ad = pre.adapters.layers[0].get_mut(tu.target);
            ad.a = tu.a.clone();
            ad.b = tu.b.clone();
            ad.scaling = c.lora_scaling();
        }

        let mut state = ServerState::new(server);
        fold_and_reset(&mut state, &[(unit, agg)], 99).unwrap();
        assert_eq!(state.round, 1);

        for trial in 0..10 {
            let batch = random_batch(&mut rng, &c, 2, 5);
            let before = forward(&pre, &plan, &batch, false).unwrap().logits;
            let after = forward(&state.model, &plan, &batch, false).unwrap().logits;
            let mut diff = before.clone();
            diff.add_scaled(&after, -1.0);
            assert!(diff.max_abs() <= 1e-10, "trial {trial}: {}", diff.max_abs());
        }
    }

    #[test]
    fn untouched_units_keep_bit_identical_deltas() {
        let c = cfg();
        let mut rng = seeded(11);
        let mut server = init_model(&c, 22).unwrap();
        // Give layer 2 a pre-existing delta to observe.
        let mut deltas = DeltaSet::empty(c.n_layers);
        deltas.layers[1][TargetMatrix::Wq.index()] = Some(rand_matrix(&mut rng, 8, 8));
        server.set_deltas(deltas);
        let before = server.deltas.layers[1].clone();

        let unit = UnitId::whole(1);
        let u1 = rand_unit_update(&mut rng, unit, c.lora_rank, &c);
        let agg = aggregate_unit(&[(0, 1.0, &u1)]).unwrap();
        let mut state = ServerState::new(server);
        fold_and_reset(
            &mut state,
            &[(unit, agg), (UnitId::whole(2), UnitAggregation::Persisted)],
            3,
        )
        .unwrap();

        assert_eq!(state.model.deltas.layers[1], before);
        assert!(state.model.deltas.layers[0][TargetMatrix::Wq.index()].is_some());
        // Adapters are refreshed: still zero-contribution, new a draw.
        for layer in &state.model.adapters.layers {
            for t in TargetMatrix::ALL {
                assert_eq!(layer.get(t).b.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn zero_stacks_refresh_adapters_and_keep_function() {
        let c = cfg();
        let mut rng = seeded(12);
        let server = init_model(&c, 23).unwrap();
        let plan = SubmodelPlan::full(c.n_layers, PruneMode::Layer);
        let reference = server.clone();
        let mut state = ServerState::new(server);
        let before_adapters = state.model.adapters.clone();
        fold_and_reset(&mut state, &[], 77).unwrap();
        assert!(state.model.adapters != before_adapters);
        let batch = random_batch(&mut rng, &c, 2, 4);
        let a = forward(&reference, &plan, &batch, false).unwrap().logits;
        let b = forward(&state.model, &plan, &batch, false).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn successive_folds_sum_like_a_single_fold() {
        let c = cfg();
        let mut rng = seeded(13);
        let unit = UnitId::whole(1);
        let u1 = rand_unit_update(&mut rng, unit, 2, &c);
        let u2 = rand_unit_update(&mut rng, unit, 3, &c);
        let agg1 = aggregate_unit(&[(0, 1.0, &u1)]).unwrap();
        let agg2 = aggregate_unit(&[(1, 1.0, &u2)]).unwrap();

        let mut seq = ServerState::new(init_model(&c, 24).unwrap());
        fold_and_reset(&mut seq, &[(unit, agg1.clone())], 1).unwrap();
        fold_and_reset(&mut seq, &[(unit, agg2.clone())], 2).unwrap();

        let mut joint = ServerState::new(init_model(&c, 24).unwrap());
        fold_and_reset(&mut joint, &[(unit, agg1), (unit, agg2)], 2).unwrap();

        for t in TargetMatrix::ALL {
            let a = seq.model.deltas.get(0, t);
            let b = joint.model.deltas.get(0, t);
            match (a, b) {
                (Some(a), Some(b)) => {
                    let mut diff = a.clone();
                    diff.add_scaled(b, -1.0);
                    assert!(diff.max_abs() <= 1e-10);
                }
                (None, None) => {}
                _ => panic!("delta presence disagrees for {}", t.label()),
            }
        }
        // Same final round seed, same refreshed adapters.
        assert_eq!(seq.model.adapters, joint.model.adapters);
    }
}
