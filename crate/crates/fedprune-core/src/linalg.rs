//! Dense linear algebra substrate: row-major f64 matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices, and seeded k-means with k-means++
//! initialization and empty-cluster repair.
//!
//! Everything here is a pure function over immutable inputs and bit-exactly
//! deterministic for fixed inputs and seed.

use rand::Rng;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("asymmetry {asymmetry:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },
    #[error("k = {k} outside 1..={n}")]
    KTooLarge { k: usize, n: usize },
}

// ============================================================================
// DenseMatrix
// ============================================================================

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.len() != rows * cols {
            return Err(LinalgError::BadShape { rows, cols, got: values.len() });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite { row: i / cols.max(1), col: i % cols.max(1) });
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    /// Rows×cols from a flat iterator of row-major values (no validation).
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "value count must match shape");
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`. Accumulates over k in the outer loop so the innermost
    /// loop runs over independent output columns and vectorizes.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions must agree");
        let n = other.cols;
        let mut out = DenseMatrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let a_row = &self.values[i * self.cols..(i + 1) * self.cols];
            let o_row = &mut out.values[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &other.values[k * n..(k + 1) * n];
                for j in 0..n {
                    o_row[j] += aik * b_row[j];
                }
            }
        }
        out
    }

    /// `self · otherᵀ` via row dot products.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "matmul_nt feature dimensions must agree");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`; both operands share their row count.
    pub fn matmul_tn(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "matmul_tn row counts must agree");
        let n = other.cols;
        let mut out = DenseMatrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let a_row = &self.values[r * self.cols..(r + 1) * self.cols];
            let b_row = &other.values[r * n..(r + 1) * n];
            for (i, &ari) in a_row.iter().enumerate() {
                let o_row = &mut out.values[i * n..(i + 1) * n];
                for j in 0..n {
                    o_row[j] += ari * b_row[j];
                }
            }
        }
        out
    }

    /// `self += factor · other`, entrywise.
    pub fn add_scaled(&mut self, other: &DenseMatrix, factor: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_scaled shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of a non-square matrix");
        (0..self.rows).map(|i| self.values[i * self.cols + i]).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ============================================================================
// Symmetric eigendecomposition (cyclic Jacobi)
// ============================================================================

/// Full spectrum of a symmetric matrix: eigenvalues ascending, eigenvectors
/// as unit-norm columns aligned with them.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `tol` bounds the accepted input asymmetry max|m[i][j] − m[j][i]|.
pub fn sym_eigen(m: &DenseMatrix, tol: f64) -> Result<EigenDecomposition, LinalgError> {
    if m.rows != m.cols {
        return Err(LinalgError::NotSquare { rows: m.rows, cols: m.cols });
    }
    let n = m.rows;
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if asym > tol {
        return Err(LinalgError::NotSymmetric { asymmetry: asym, tol });
    }

    let mut a = m.values.clone();
    // Symmetrize exactly so the iteration sees one consistent value per pair.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = DenseMatrix::identity(n).values;
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-14 * frob.max(1e-300);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= stop {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Column rotation A ← A·J.
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                // Row rotation A ← Jᵀ·A.
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                // Eigenvector accumulation V ← V·J.
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        a[x * n + x].partial_cmp(&a[y * n + y]).expect("eigenvalues are finite").then(x.cmp(&y))
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // Normalize and fix a sign convention: largest-magnitude entry positive.
        let mut norm_sq = 0.0;
        let mut lead = 0usize;
        let mut lead_abs = -1.0;
        for i in 0..n {
            let x = v[i * n + src];
            norm_sq += x * x;
            if x.abs() > lead_abs {
                lead_abs = x.abs();
                lead = i;
            }
        }
        let norm = norm_sq.sqrt();
        let sign = if v[lead * n + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.values[i * n + col] = sign * v[i * n + src] / norm;
        }
    }

    Ok(EigenDecomposition { eigenvalues, eigenvectors: vectors })
}

// ============================================================================
// k-means
// ============================================================================

/// Result of Lloyd's algorithm: per-point cluster indices in [0,k), final
/// centroids, and the summed squared distance of points to their centroids.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    pub inertia: f64,
}

/// Seeded k-means over the rows of `points`.
///
/// k-means++ initialization, Lloyd iterations until the assignment fixpoint
/// or `max_iter`, and empty-cluster repair that moves the point farthest
/// from its current centroid into the empty cluster.
pub fn kmeans(
    points: &DenseMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult, LinalgError> {
    let (result, _trace) = kmeans_traced(points, k, seed, max_iter)?;
    Ok(result)
}

/// As `kmeans`, but also reports the inertia after every Lloyd iteration
/// (useful for diagnostics; the sequence is non-increasing).
pub fn kmeans_traced(
    points: &DenseMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(KMeansResult, Vec<f64>), LinalgError> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(LinalgError::KTooLarge { k, n });
    }
    let dim = points.cols();
    let mut rng = rng::seeded(seed);

    // k-means++ seeding: first centroid uniform, the rest D²-weighted.
    let mut centroids = DenseMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist_sq(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with an existing centroid; any pick works.
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d = dist_sq(points.row(i), centroids.row(c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    Ok(lloyd(points, centroids, max_iter))
}

/// Lloyd iterations from caller-supplied initial centroids (one row per
/// cluster). Deterministic; same fixpoint/repair rules as `kmeans`.
pub fn kmeans_from_centroids(
    points: &DenseMatrix,
    centroids: &DenseMatrix,
    max_iter: usize,
) -> Result<KMeansResult, LinalgError> {
    let k = centroids.rows();
    if k == 0 || k > points.rows() {
        return Err(LinalgError::KTooLarge { k, n: points.rows() });
    }
    if centroids.cols() != points.cols() {
        return Err(LinalgError::BadShape {
            rows: centroids.rows(),
            cols: points.cols(),
            got: centroids.cols(),
        });
    }
    Ok(lloyd(points, centroids.clone(), max_iter).0)
}

fn lloyd(
    points: &DenseMatrix,
    mut centroids: DenseMatrix,
    max_iter: usize,
) -> (KMeansResult, Vec<f64>) {
    let n = points.rows();
    let dim = points.cols();
    let k = centroids.rows();
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    for _iter in 0..max_iter.max(1) {
        // Assignment step; ties go to the lower cluster index.
        let mut changed = false;
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = dist_sq(points.row(i), centroids.row(0));
            for c in 1..k {
                let d = dist_sq(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            counts[best] += 1;
        }

        // Empty-cluster repair: move the point farthest from its centroid,
        // never emptying another cluster in the process.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assignments[i]] < 2 {
                    continue;
                }
                let d = dist_sq(points.row(i), centroids.row(assignments[i]));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            let i = far.expect("a cluster with at least two points exists while any is empty");
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] = 1;
            changed = true;
        }

        // Update step: centroid = mean of members.
        centroids = DenseMatrix::zeros(k, dim);
        for i in 0..n {
            let c = assignments[i];
            let row = points.row(i);
            let crow = centroids.row_mut(c);
            for (acc, &x) in crow.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for x in centroids.row_mut(c) {
                *x *= inv;
            }
        }

        trace.push(inertia_of(points, &assignments, &centroids));
        if !changed {
            break;
        }
    }

    let inertia = inertia_of(points, &assignments, &centroids);
    (KMeansResult { assignments, centroids, inertia }, trace)
}

fn inertia_of(points: &DenseMatrix, assignments: &[usize], centroids: &DenseMatrix) -> f64 {
    (0..points.rows()).map(|i| dist_sq(points.row(i), centroids.row(assignments[i]))).sum()
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ============================================================================
// Tests
// ============================================================================
