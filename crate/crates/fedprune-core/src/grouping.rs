//! Macro-level pruning: partition units into K functional groups by spectral
//! clustering of the CKA similarity graph.
//!
//! The similarity matrix is read as a complete weighted graph (self-loops
//! dropped), its unnormalized Laplacian L = D − W is eigendecomposed, the
//! eigenvectors of the K smallest non-zero eigenvalues form the feature
//! matrix E, and k-means over E's rows yields the groups.

use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::rng::derive;
use crate::similarity::SimilarityMatrix;

/// Relative threshold below which an eigenvalue counts as zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-9;

/// Seeded k-means restarts inside `partition_units` (besides the
/// deterministic sliced init); the lowest-inertia run wins.
const KMEANS_RESTARTS: u64 = 10;
const KMEANS_MAX_ITER: usize = 100;

/// A later restart must beat the incumbent by this relative margin; exact
/// objective ties (they do occur, e.g. embeddings with symmetric degenerate
/// eigenspaces) resolve to the earliest restart, which keeps the winner off
/// floating-point noise.
const RESTART_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GroupingError {
    #[error("only {available} non-zero eigenvalues available, {requested} requested")]
    InsufficientSpectrum { available: usize, requested: usize },
    #[error("group count {k} outside 1..={n}")]
    BadGroupCount { k: usize, n: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A partition of units 1..=N into K non-empty disjoint groups. Each group
/// is sorted ascending; groups are ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn unit_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Spectral feature matrix: rows = units, columns = eigenvectors of the
/// selected (smallest non-zero, ascending) eigenvalues.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    pub e: DenseMatrix,
    pub selected_eigenvalues: Vec<f64>,
}

/// Unnormalized graph Laplacian of the similarity matrix: zero the diagonal
/// (no self-loops), D = diag(row sums), L = D − W.
pub fn laplacian(w: &SimilarityMatrix) -> DenseMatrix {
    let n = w.units();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if i != j {
                degree += w.w.get(i, j);
                l.set(i, j, -w.w.get(i, j));
            }
        }
        l.set(i, i, degree);
    }
    l
}

/// Eigenvectors of the k smallest eigenvalues above the zero threshold
/// (`zero_tol` is relative to the largest eigenvalue).
pub fn spectral_embed(
    l: &DenseMatrix,
    k: usize,
    zero_tol: f64,
) -> Result<SpectralEmbedding, GroupingError> {
    let eig = linalg::sym_eigen(l, 1e-9)?;
    let n = l.rows();
    let lambda_max = eig.eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    let threshold = zero_tol * lambda_max;
    let selected: Vec<usize> =
        (0..n).filter(|&i| eig.eigenvalues[i] > threshold).collect();
    if selected.len() < k {
        return Err(GroupingError::InsufficientSpectrum { available: selected.len(), requested: k });
    }
    let chosen = &selected[..k];
    let e = DenseMatrix::from_fn(n, k, |i, j| eig.eigenvectors.get(i, chosen[j]));
    let selected_eigenvalues = chosen.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(SpectralEmbedding { e, selected_eigenvalues })
}

/// Partitions units 1..=N into k groups.
///
/// k = N and k = 1 bypass the spectral path (singletons / one group);
/// otherwise Laplacian → spectral embedding → k-means over E's rows, with
/// a few seeded restarts keeping the lowest-inertia clustering.
pub fn partition_units(
    w: &SimilarityMatrix,
    k: usize,
    seed: u64,
) -> Result<Grouping, GroupingError> {
    let n = w.units();
    if k == 0 || k > n {
        return Err(GroupingError::BadGroupCount { k, n });
    }
    if k == n {
        return Ok(Grouping { groups: (1..=n).map(|u| vec![u]).collect() });
    }
    if k == 1 {
        return Ok(Grouping { groups: vec![(1..=n).collect()] });
    }

    let embedding = spectral_embed(&laplacian(w), k, DEFAULT_ZERO_TOL)?;

    // First candidate: Lloyd from centroids sliced along the Fiedler column
    // (contiguous chunks of the rows sorted by E[:,0]). This init starts at
    // the split the leading eigenvector suggests, which seeded restarts can
    // miss when clusters collapse onto each other in the trailing embedding
    // dimensions. Then seeded k-means++ restarts; a later run must improve
    // the objective by a real margin to displace an earlier one.
    let mut best = linalg::kmeans_from_centroids(
        &embedding.e,
        &sliced_centroids(&embedding.e, k),
        KMEANS_MAX_ITER,
    )?;
    for restart in 0..KMEANS_RESTARTS {
        let run = linalg::kmeans(&embedding.e, k, derive(seed, &[restart]), KMEANS_MAX_ITER)?;
        if run.inertia < best.inertia - RESTART_TIE_TOL * best.inertia.max(1.0) {
            best = run;
        }
    }
    let result = best;

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (point, &cluster) in result.assignments.iter().enumerate() {
        groups[cluster].push(point + 1);
    }
    groups.retain(|g| !g.is_empty());
    debug_assert_eq!(groups.len(), k, "k-means repair guarantees k non-empty clusters");
    groups.sort_by_key(|g| g[0]);
    Ok(Grouping { groups })
}

/// Initial centroids from sorting rows by the first embedding column and
/// averaging k contiguous, near-equal chunks (larger chunks first).
fn sliced_centroids(e: &DenseMatrix, k: usize) -> DenseMatrix {
    let n = e.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        e.get(a, 0).partial_cmp(&e.get(b, 0)).expect("embedding is finite").then(a.cmp(&b))
    });
    let mut centroids = DenseMatrix::zeros(k, e.cols());
    let base = n / k;
    let extra = n % k;
    let mut offset = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        let chunk = &order[offset..offset + size];
        let crow = centroids.row_mut(c);
        for &i in chunk {
            for (acc, &x) in crow.iter_mut().zip(e.row(i)) {
                *acc += x;
            }
        }
        for x in crow.iter_mut() {
            *x /= size as f64;
        }
        offset += size;
    }
    centroids
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use rand::Rng;

    /// Wraps a raw symmetric matrix as a SimilarityMatrix for graph tests;
    /// the adjacent vector is irrelevant here.
    fn sim_from(w: DenseMatrix) -> SimilarityMatrix {
        let n = w.rows();
        SimilarityMatrix { w, adjacent: vec![0.0; n] }
    }

    fn uniform_complete(n: usize, c: f64) -> SimilarityMatrix {
        sim_from(DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { c }))
    }

    #[test]
    fn laplacian_two_unit_example() {
        let w = sim_from(DenseMatrix::new(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap());
        let l = laplacian(&w);
        assert_eq!(l.values(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_psd() {
        let mut rng = crate::rng::seeded(17);
        for n in [2usize, 4, 7] {
            let raw = DenseMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
            let w = sim_from(DenseMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.5 * (raw.get(i, j) + raw.get(j, i))
                }
            }));
            let l = laplacian(&w);
            for i in 0..n {
                let s: f64 = l.row(i).iter().sum();
                assert!(s.abs() <= 1e-12);
            }
            let eig = sym_eigen(&l, 1e-12).unwrap();
            assert!(eig.eigenvalues[0] >= -1e-9);
            assert!(eig.eigenvalues[0].abs() <= 1e-8 * l.max_abs().max(1.0));
        }
    }

    #[test]
    fn spectral_embed_fiedler_splits_a_path() {
        // Path-like similarity 1-2-3-4 with a weak middle link: the
        // minimum-weight 2-partition (by exhaustive enumeration) cuts that
        // link, and the Fiedler vector's signs split {1,2} from {3,4}.
        let mut w = DenseMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.02 });
        for (a, b, s) in [(0usize, 1usize, 0.9), (1, 2, 0.3), (2, 3, 0.9)] {
            w.set(a, b, s);
            w.set(b, a, s);
        }
        let sim = sim_from(w.clone());

        let mut best_mask = 0u32;
        let mut best_cut = f64::INFINITY;
        for mask in 1u32..(1 << 4) - 1 {
            let mut cut = 0.0;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if ((mask >> i) & 1) != ((mask >> j) & 1) {
                        cut += w.get(i, j);
                    }
                }
            }
            if cut < best_cut {
                best_cut = cut;
                best_mask = mask;
            }
        }
        assert!(best_mask == 0b0011 || best_mask == 0b1100, "oracle cuts the middle edge");

        let emb = spectral_embed(&laplacian(&sim), 1, DEFAULT_ZERO_TOL).unwrap();
        let signs: Vec<bool> = (0..4).map(|i| emb.e.get(i, 0) > 0.0).collect();
        assert_eq!(signs[0], signs[1]);
        assert_eq!(signs[2], signs[3]);
        assert_ne!(signs[0], signs[2]);
    }

    #[test]
    fn spectral_embed_rejects_k_beyond_nonzero_count() {
        let sim = uniform_complete(4, 0.3);
        let l = laplacian(&sim);
        // Connected graph: exactly one zero eigenvalue, three non-zero.
        assert!(spectral_embed(&l, 3, DEFAULT_ZERO_TOL).is_ok());
        assert!(matches!(
            spectral_embed(&l, 4, DEFAULT_ZERO_TOL),
            Err(GroupingError::InsufficientSpectrum { available: 3, requested: 4 })
        ));
    }

    #[test]
    fn spectral_embed_uniform_complete_graph_spectrum() {
        let c = 0.4;
        let sim = uniform_complete(3, c);
        let emb = spectral_embed(&laplacian(&sim), 2, DEFAULT_ZERO_TOL).unwrap();
        for v in &emb.selected_eigenvalues {
            assert!((v - 3.0 * c).abs() < 1e-10, "expected N·c = 1.2, got {v}");
        }
    }

    #[test]
    fn partition_bypasses_for_extreme_k() {
        let sim = uniform_complete(5, 0.5);
        let singletons = partition_units(&sim, 5, 0).unwrap();
        assert_eq!(singletons.groups, vec![vec![1], vec![2], vec![3], vec![4], vec![5]]);
        let one = partition_units(&sim, 1, 0).unwrap();
        assert_eq!(one.groups, vec![vec![1, 2, 3, 4, 5]]);
    }

    #[test]
    fn partition_recovers_two_planted_blocks() {
        // Blocks {1,2} and {3,4}: within 0.9, cross 0.05. The exhaustive
        // 2-partition maximizing within-group minus cross-group similarity
        // is exactly the planted split.
        let w = DenseMatrix::new(
            4,
            4,
            vec![
                1.0, 0.9, 0.05, 0.05, //
                0.9, 1.0, 0.05, 0.05, //
                0.05, 0.05, 1.0, 0.9, //
                0.05, 0.05, 0.9, 1.0,
            ],
        )
        .unwrap();
        let sim = sim_from(w.clone());

        let mut best_mask = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for mask in 1u32..(1 << 4) - 1 {
            let mut within = 0.0;
            let mut cross = 0.0;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if ((mask >> i) & 1) == ((mask >> j) & 1) {
                        within += w.get(i, j);
                    } else {
                        cross += w.get(i, j);
                    }
                }
            }
            if within - cross > best_score {
                best_score = within - cross;
                best_mask = mask;
            }
        }
        assert!(best_mask == 0b0011 || best_mask == 0b1100);

        for seed in 0..10 {
            let g = partition_units(&sim, 2, seed).unwrap();
            assert_eq!(g.groups, vec![vec![1, 2], vec![3, 4]]);
        }
    }

    #[test]
    fn partition_is_valid_and_deterministic() {
        let mut rng = crate::rng::seeded(99);
        for n in [4usize, 6, 8] {
            let raw = DenseMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
            let sim = sim_from(DenseMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.5 * (raw.get(i, j) + raw.get(j, i)).abs() * 0.9
                }
            }));
            for k in 2..n {
                let a = partition_units(&sim, k, 123).unwrap();
                let b = partition_units(&sim, k, 123).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.k(), k);
                let mut seen = vec![false; n + 1];
                for group in &a.groups {
                    assert!(!group.is_empty());
                    for w in group.windows(2) {
                        assert!(w[0] < w[1]);
                    }
                    for &u in group {
                        assert!((1..=n).contains(&u));
                        assert!(!seen[u], "unit {u} in two groups");
                        seen[u] = true;
                    }
                }
                assert!(seen[1..=n].iter().all(|&s| s), "every unit covered");
            }
        }
    }

    #[test]
    fn partition_rejects_bad_k() {
        let sim = uniform_complete(4, 0.2);
        assert!(matches!(
            partition_units(&sim, 0, 1),
            Err(GroupingError::BadGroupCount { k: 0, n: 4 })
        ));
        assert!(matches!(
            partition_units(&sim, 5, 1),
            Err(GroupingError::BadGroupCount { k: 5, n: 4 })
        ));
    }
}
