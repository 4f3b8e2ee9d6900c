//! Self-contained synthetic corpus: G order-1 Markov regimes over a small
//! vocabulary. Regime g biases each symbol i toward (i + g + 1) mod V (and,
//! weaker, toward (i + 2g + 3) mod V), so regimes are mutually distinct and
//! the dynamics are learnable by a small causal model. Partitioning is
//! either round-robin (IID) or per-device Dirichlet mixtures over regimes.

use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::rng::{self, derive};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
}

/// How shards are assigned to devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Synthetic corpus shape. `seq_tokens` counts raw tokens per sequence; a
/// training pair uses the first `seq_tokens - 1` as inputs and the last
/// `seq_tokens - 1` as next-token targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_regimes: usize,
    pub total_sequences: usize,
    pub seq_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { vocab_size: 64, n_regimes: 4, total_sequences: 400, seq_tokens: 33 }
    }
}

impl CorpusSpec {
    pub fn validate(&self, fleet: usize) -> Result<(), DataError> {
        if self.vocab_size < 2 {
            return Err(DataError::BadSpec("vocab_size must be >= 2".into()));
        }
        if self.n_regimes == 0 {
            return Err(DataError::BadSpec("n_regimes must be >= 1".into()));
        }
        if self.seq_tokens < 2 {
            return Err(DataError::BadSpec("seq_tokens must be >= 2".into()));
        }
        if fleet == 0 {
            return Err(DataError::BadSpec("fleet must be >= 1".into()));
        }
        if self.total_sequences < fleet {
            return Err(DataError::BadSpec(format!(
                "total_sequences {} must cover fleet {fleet} (every shard non-empty)",
                self.total_sequences
            )));
        }
        Ok(())
    }
}

/// Row-stochastic transition matrix of one regime.
#[derive(Debug, Clone)]
pub struct MarkovRegime {
    pub transition: DenseMatrix,
}

/// One device's data: token sequences plus the regime each was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub sequences: Vec<Vec<u32>>,
    pub regimes: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Builds the G regimes for a corpus, deterministically from `seed`.
pub fn make_regimes(spec: &CorpusSpec, seed: u64) -> Vec<MarkovRegime> {
    let v = spec.vocab_size;
    let mut rng = rng::seeded(derive(seed, &[0]));
    (0..spec.n_regimes)
        .map(|g| {
            let shift = g + 1;
            let mut t = DenseMatrix::from_fn(v, v, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            for i in 0..v {
                let primary = (i + shift) % v;
                let secondary = (i + 2 * shift + 1) % v;
                t.set(i, primary, t.get(i, primary) + 2.5);
                t.set(i, secondary, t.get(i, secondary) + 1.5);
                let row = t.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            MarkovRegime { transition: t }
        })
        .collect()
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_sequence<R: Rng>(rng: &mut R, regime: &MarkovRegime, spec: &CorpusSpec) -> Vec<u32> {
    let v = spec.vocab_size;
    let mut seq = Vec::with_capacity(spec.seq_tokens);
    let mut cur = rng.gen_range(0..v);
    seq.push(cur as u32);
    for _ in 1..spec.seq_tokens {
        cur = sample_categorical(rng, regime.transition.row(cur));
        seq.push(cur as u32);
    }
    seq
}

/// Splits a freshly generated corpus across `fleet` devices. IID cycles
/// regimes over sequences and deals them round-robin; Dirichlet draws each
/// device a regime mixture from a symmetric Dirichlet(alpha) and samples its
/// sequences from that mixture. Deterministic in `seed` either way.
pub fn partition_data(
    spec: &CorpusSpec,
    fleet: usize,
    scheme: &DataScheme,
    seed: u64,
) -> Result<Vec<Shard>, DataError> {
    spec.validate(fleet)?;
    let regimes = make_regimes(spec, seed);
    let mut shards = vec![Shard { sequences: Vec::new(), regimes: Vec::new() }; fleet];
    match scheme {
        DataScheme::Iid => {
            let mut rng = rng::seeded(derive(seed, &[1]));
            for t in 0..spec.total_sequences {
                let g = t % spec.n_regimes;
                let seq = sample_sequence(&mut rng, &regimes[g], spec);
                let d = t % fleet;
                shards[d].sequences.push(seq);
                shards[d].regimes.push(g);
            }
        }
        DataScheme::Dirichlet { alpha } => {
            if !alpha.is_finite() || *alpha <= 0.0 {
                return Err(DataError::BadSpec("dirichlet alpha must be finite and positive".into()));
            }
            let base = spec.total_sequences / fleet;
            let remainder = spec.total_sequences % fleet;
            for (d, shard) in shards.iter_mut().enumerate() {
                let count = base + usize::from(d < remainder);
                let mut rng = rng::seeded(derive(seed, &[2, d as u64]));
                let mixture = if spec.n_regimes == 1 {
                    vec![1.0]
                } else {
                    Dirichlet::new_with_size(*alpha, spec.n_regimes)
                        .map_err(|e| DataError::BadSpec(format!("dirichlet: {e}")))?
                        .sample(&mut rng)
                };
                for _ in 0..count {
                    let g = sample_categorical(&mut rng, &mixture);
                    shard.sequences.push(sample_sequence(&mut rng, &regimes[g], spec));
                    shard.regimes.push(g);
                }
            }
        }
    }
    Ok(shards)
}

/// Held-out sequences cycling through all regimes, independent of any shard.
pub fn eval_set(spec: &CorpusSpec, n_sequences: usize, seed: u64) -> Result<Shard, DataError> {
    spec.validate(1)?;
    if n_sequences == 0 {
        return Err(DataError::BadSpec("eval set must be non-empty".into()));
    }
    let regimes = make_regimes(spec, seed);
    let mut rng = rng::seeded(derive(seed, &[3]));
    let mut shard = Shard { sequences: Vec::new(), regimes: Vec::new() };
    for t in 0..n_sequences {
        let g = t % spec.n_regimes;
        shard.sequences.push(sample_sequence(&mut rng, &regimes[g], spec));
        shard.regimes.push(g);
    }
    Ok(shard)
}
