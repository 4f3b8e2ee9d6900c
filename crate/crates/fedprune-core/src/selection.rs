//! Micro-level pruning: importance scores from adjacent-pair similarity,
//! group-wise softmax selection probabilities, stochastic sampling of one
//! representative per group, and the six reference baseline strategies.

use rand::Rng;
use thiserror::Error;

use crate::grouping::Grouping;
use crate::linalg::{dot, DenseMatrix};
use crate::rng;
use crate::similarity::{ActivationSet, SimilarityMatrix};
use crate::units::PruneMode;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("keep = {keep} outside 1..={n_units}")]
    KeepTooLarge { keep: usize, n_units: usize },
    #[error("activation set covers {got} units, selector expected {expected}")]
    UnitCountMismatch { expected: usize, got: usize },
}

/// Per-unit importance σ_n = 1 − w_{n−1,n}: a unit whose output diverges from
/// its input matters more. `sigma[i]` belongs to unit i+1.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub sigma: Vec<f64>,
}

/// One group's selection state: members ascending, softmax probabilities
/// aligned with members, and the sampled representative once drawn.
#[derive(Debug, Clone)]
pub struct GroupSelection {
    pub members: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub chosen: Option<usize>,
}

/// Group-wise selection plan over flat unit indices.
#[derive(Debug, Clone)]
pub struct SelectionPlan {
    pub groups: Vec<GroupSelection>,
    pub mode: PruneMode,
}

impl SelectionPlan {
    /// Sampled representatives in ascending unit order.
    pub fn chosen_units(&self) -> Vec<usize> {
        let mut units: Vec<usize> = self.groups.iter().filter_map(|g| g.chosen).collect();
        units.sort_unstable();
        units
    }
}

/// Baseline pruning strategies used as comparators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Middle,
    Norm,
    Rm,
    Bi,
    Deep,
}

/// σ_n = 1 − adjacent[n] for every unit.
pub fn importance_scores(sim: &SimilarityMatrix) -> ImportanceScores {
    ImportanceScores { sigma: sim.adjacent.iter().map(|a| 1.0 - a).collect() }
}

/// Group-wise softmax of importance scores,
/// p_n = exp(σ_n)/Σ_{m∈G} exp(σ_m), stabilized by subtracting the group
/// max before exponentiation. `chosen` is left unset.
pub fn selection_probabilities(
    scores: &ImportanceScores,
    grouping: &Grouping,
    mode: PruneMode,
) -> SelectionPlan {
    let groups = grouping
        .groups
        .iter()
        .map(|members| {
            let sigmas: Vec<f64> = members.iter().map(|&u| scores.sigma[u - 1]).collect();
            let max = sigmas.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let exps: Vec<f64> = sigmas.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            GroupSelection {
                members: members.clone(),
                probabilities: exps.iter().map(|e| e / total).collect(),
                chosen: None,
            }
        })
        .collect();
    SelectionPlan { groups, mode }
}

/// Draws one representative per group by inverse-CDF over the group's
/// probabilities, using a deterministic seeded RNG. Groups are visited in
/// plan order; one uniform draw per group.
pub fn sample_representatives(plan: &SelectionPlan, seed: u64) -> SelectionPlan {
    let mut rng = rng::seeded(seed);
    let groups = plan
        .groups
        .iter()
        .map(|g| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = *g.members.last().expect("groups are non-empty");
            for (&member, &p) in g.members.iter().zip(&g.probabilities) {
                acc += p;
                if u < acc {
                    chosen = member;
                    break;
                }
            }
            GroupSelection { chosen: Some(chosen), ..g.clone() }
        })
        .collect();
    SelectionPlan { groups, mode: plan.mode }
}

/// One of the six reference strategies; returns the sorted kept-unit list.
///
/// Norm/RM/BI rank units from captured activations; Random is seeded; Middle
/// and Deep are positional. Rank ties go to the lower unit index.
pub fn baseline_select(
    kind: BaselineKind,
    n_units: usize,
    keep: usize,
    acts: &ActivationSet,
    _sim: &SimilarityMatrix,
    seed: u64,
) -> Result<Vec<usize>, SelectionError> {
    if keep == 0 || keep > n_units {
        return Err(SelectionError::KeepTooLarge { keep, n_units });
    }
    if matches!(kind, BaselineKind::Norm | BaselineKind::Rm | BaselineKind::Bi)
        && acts.units() != n_units
    {
        return Err(SelectionError::UnitCountMismatch { expected: n_units, got: acts.units() });
    }

    let mut kept = match kind {
        BaselineKind::Random => {
            let mut rng = rng::seeded(seed);
            rand::seq::index::sample(&mut rng, n_units, keep).iter().map(|i| i + 1).collect()
        }
        BaselineKind::Middle => {
            let prune = n_units - keep;
            let center = n_units.div_ceil(2);
            let start =
                (center + 1).saturating_sub(prune.div_ceil(2)).max(1).min(n_units - prune + 1);
            (1..=n_units).filter(|&u| u < start || u >= start + prune).collect()
        }
        BaselineKind::Norm => keep_top(n_units, keep, |u| mean_row_norm(acts.output(u))),
        BaselineKind::Rm => keep_top(n_units, keep, |u| {
            mean_row_ratio(acts.output(u - 1), acts.output(u))
        }),
        BaselineKind::Bi => keep_top(n_units, keep, |u| {
            1.0 - mean_row_cosine(acts.output(u - 1), acts.output(u))
        }),
        BaselineKind::Deep => {
            // Deepest units pruned first, but the final unit is always kept.
            let mut units: Vec<usize> = (1..keep).collect();
            units.push(n_units);
            units
        }
    };
    kept.sort_unstable();
    Ok(kept)
}

/// Units 1..=n ranked by score descending (ties to the lower index), top
/// `keep` retained.
fn keep_top(n_units: usize, keep: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = (1..=n_units).map(|u| (u, score(u))).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite").then(a.0.cmp(&b.0)));
    ranked.truncate(keep);
    ranked.into_iter().map(|(u, _)| u).collect()
}

fn mean_row_norm(m: &DenseMatrix) -> f64 {
    let rows = m.rows();
    (0..rows).map(|r| dot(m.row(r), m.row(r)).sqrt()).sum::<f64>() / rows as f64
}

/// Mean over rows of ‖out−in‖/‖out‖ — the relative residual-stream change a
/// unit contributes (out = in + f(in) on the residual stream).
fn mean_row_ratio(input: &DenseMatrix, output: &DenseMatrix) -> f64 {
    let rows = input.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let delta_sq: f64 =
            input.row(r).iter().zip(output.row(r)).map(|(i, o)| (o - i) * (o - i)).sum();
        let out_norm = dot(output.row(r), output.row(r)).sqrt();
        if out_norm > 1e-300 {
            total += delta_sq.sqrt() / out_norm;
        }
    }
    total / rows as f64
}

fn mean_row_cosine(input: &DenseMatrix, output: &DenseMatrix) -> f64 {
    let rows = input.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let denom = dot(input.row(r), input.row(r)).sqrt() * dot(output.row(r), output.row(r)).sqrt();
        if denom > 1e-300 {
            total += dot(input.row(r), output.row(r)) / denom;
        } else {
            // A degenerate row carries no evidence of change.
            total += 1.0;
        }
    }
    total / rows as f64
}

// ============================================================================
// Tests
// ============================================================================
