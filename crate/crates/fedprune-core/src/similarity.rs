//! HSIC/CKA similarity between unit output activations, and assembly of the
//! similarity matrix W plus the adjacent-pair vector used for importance
//! scores.
//!
//! The linear-kernel biased HSIC estimator is computed in feature space as
//! ‖centered(a)ᵀ·centered(b)‖_F² / (n−1)², which is algebraically equal to
//! the Gram-matrix form tr(H·Kₐ·H·K_b)/(n−1)²; tests hold the two routes
//! against each other.

use thiserror::Error;

use crate::linalg::DenseMatrix;

/// Self-HSIC at or below this threshold means the activations are constant
/// (zero centered variance) and CKA is undefined.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("row counts differ: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("need at least 2 rows, got {rows}")]
    TooFewSamples { rows: usize },
    #[error("constant activations{}", match .unit { Some(u) => format!(" at unit {u}"), None => String::new() })]
    DegenerateActivations { unit: Option<usize> },
    #[error("activation set needs the embedding output plus at least one unit")]
    NoUnits,
}

/// Ordered post-unit residual-stream captures. Index 0 is the embedding
/// output; indices 1..=N are the outputs of units 1..=N (2N in component
/// mode). Each matrix is (samples·tokens) × d_model.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    outputs: Vec<DenseMatrix>,
}

impl ActivationSet {
    pub fn new(outputs: Vec<DenseMatrix>) -> Result<Self, SimilarityError> {
        if outputs.len() < 2 {
            return Err(SimilarityError::NoUnits);
        }
        let rows = outputs[0].rows();
        for m in &outputs {
            if m.rows() != rows {
                return Err(SimilarityError::RowMismatch { left: rows, right: m.rows() });
            }
        }
        if rows < 2 {
            return Err(SimilarityError::TooFewSamples { rows });
        }
        Ok(Self { outputs })
    }

    /// Number of prunable units (the embedding slot does not count).
    pub fn units(&self) -> usize {
        self.outputs.len() - 1
    }

    /// Output of unit `i`; index 0 is the embedding output.
    pub fn output(&self, i: usize) -> &DenseMatrix {
        &self.outputs[i]
    }
}

/// CKA matrix over units 1..=N plus the adjacent-pair vector.
///
/// `adjacent[n−1]` holds CKA(output of unit n−1, output of unit n), with the
/// embedding output standing in as unit 0 so unit 1 has a predecessor.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub w: DenseMatrix,
    pub adjacent: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn units(&self) -> usize {
        self.w.rows()
    }

    /// Adjacent-pair CKA for 1-based unit `n`.
    pub fn adjacent_for_unit(&self, n: usize) -> f64 {
        self.adjacent[n - 1]
    }
}

/// Empirical biased linear-kernel HSIC: tr(H·Kₐ·H·K_b)/(n−1)².
pub fn hsic_linear(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, SimilarityError> {
    check_pair(a, b)?;
    let ca = center_columns(a);
    let cb = center_columns(b);
    Ok(hsic_centered(&ca, &cb))
}

/// Linear CKA: HSIC(a,b)/√(HSIC(a,a)·HSIC(b,b)), clamped to [0,1].
pub fn cka(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, SimilarityError> {
    check_pair(a, b)?;
    let ca = center_columns(a);
    let cb = center_columns(b);
    let saa = hsic_centered(&ca, &ca);
    let sbb = hsic_centered(&cb, &cb);
    if saa <= DEGENERATE_EPS || sbb <= DEGENERATE_EPS {
        return Err(SimilarityError::DegenerateActivations { unit: None });
    }
    let sab = hsic_centered(&ca, &cb);
    Ok(clamp01(sab / (saa * sbb).sqrt()))
}

/// Builds the full similarity matrix over all units plus the adjacent-pair
/// vector, reusing one centering pass per unit output.
pub fn build_similarity(acts: &ActivationSet) -> Result<SimilarityMatrix, SimilarityError> {
    let n_units = acts.units();
    let centered: Vec<DenseMatrix> = (0..=n_units).map(|i| center_columns(acts.output(i))).collect();
    let mut selfh = Vec::with_capacity(n_units + 1);
    for (i, c) in centered.iter().enumerate() {
        let s = hsic_centered(c, c);
        if s <= DEGENERATE_EPS {
            return Err(SimilarityError::DegenerateActivations { unit: Some(i) });
        }
        selfh.push(s);
    }

    let mut w = DenseMatrix::zeros(n_units, n_units);
    for i in 1..=n_units {
        w.set(i - 1, i - 1, clamp01(selfh[i] / (selfh[i] * selfh[i]).sqrt()));
        for j in (i + 1)..=n_units {
            let v = clamp01(
                hsic_centered(&centered[i], &centered[j]) / (selfh[i] * selfh[j]).sqrt(),
            );
            w.set(i - 1, j - 1, v);
            w.set(j - 1, i - 1, v);
        }
    }

    let adjacent: Vec<f64> = (1..=n_units)
        .map(|n| {
            clamp01(
                hsic_centered(&centered[n - 1], &centered[n])
                    / (selfh[n - 1] * selfh[n]).sqrt(),
            )
        })
        .collect();

    Ok(SimilarityMatrix { w, adjacent })
}

fn check_pair(a: &DenseMatrix, b: &DenseMatrix) -> Result<(), SimilarityError> {
    if a.rows() != b.rows() {
        return Err(SimilarityError::RowMismatch { left: a.rows(), right: b.rows() });
    }
    if a.rows() < 2 {
        return Err(SimilarityError::TooFewSamples { rows: a.rows() });
    }
    Ok(())
}

/// Subtracts the per-column mean (the action of H on the sample axis).
fn center_columns(m: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut means = vec![0.0; cols];
    for r in 0..rows {
        for (mean, &v) in means.iter_mut().zip(m.row(r)) {
            *mean += v;
        }
    }
    let inv = 1.0 / rows as f64;
    for mean in &mut means {
        *mean *= inv;
    }
    let mut out = m.clone();
    for r in 0..rows {
        for (v, &mean) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    out
}

/// ‖caᵀ·cb‖_F²/(n−1)² for already-centered inputs.
fn hsic_centered(ca: &DenseMatrix, cb: &DenseMatrix) -> f64 {
    let cross = ca.matmul_tn(cb);
    let n = ca.rows() as f64;
    let frob_sq: f64 = cross.values().iter().map(|v| v * v).sum();
    (frob_sq / ((n - 1.0) * (n - 1.0))).max(0.0)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

// ============================================================================
// Tests
// ============================================================================
