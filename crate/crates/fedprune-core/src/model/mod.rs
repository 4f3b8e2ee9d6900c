//! Toy decoder-only transformer: frozen Gaussian base weights, LoRA adapters
//! on every projection, folded per-matrix deltas from previous rounds, and a
//! merged-weight cache for fast forward passes.
//!
//! Weight layout convention: every projection is stored input×output so the
//! forward pass is a plain row-major product Y = X·W. The merged cache also
//! keeps the output×input transpose for the backward pass. LoRA factors are
//! a: rank×in and b: out×rank; the effective update is scaling·(b·a),
//! transposed into the input×output layout when folded.

mod backward;
mod container;
mod forward;
mod train;

pub use backward::{loss_and_grads, LoraGrads, TargetGrad, UnitGrads};
pub use container::{load_model, save_model, ContainerError};
pub use forward::{forward, Batch, ForwardPass};
pub use train::{local_finetune, CosineSchedule, FinetuneOutcome};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::rng;
use crate::units::UnitPart;

/// Standard deviation for base weights and fresh LoRA a factors.
pub const INIT_STD: f64 = 0.02;
/// RMS-norm stabilizer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("plan unit layer {layer} outside 1..={n_layers}")]
    PlanUnitOutOfRange { layer: usize, n_layers: usize },
    #[error("token id {token} outside vocabulary 0..{vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("batch shape mismatch: {0}")]
    BadBatch(String),
    #[error("local fine-tuning requires a non-empty shard")]
    EmptyShard,
}

/// Architecture and LoRA hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        let cap = self.d_model.min(self.d_ff) / 2;
        if self.lora_rank > cap {
            return Err(ModelError::InvalidConfig(format!(
                "lora_rank {} exceeds min(d_model, d_ff)/2 = {cap}",
                self.lora_rank
            )));
        }
        if !self.lora_alpha.is_finite() || self.lora_alpha <= 0.0 {
            return Err(ModelError::InvalidConfig("lora_alpha must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// The six adapted projections of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMatrix {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl TargetMatrix {
    pub const ALL: [TargetMatrix; 6] = [
        TargetMatrix::Wq,
        TargetMatrix::Wk,
        TargetMatrix::Wv,
        TargetMatrix::Wo,
        TargetMatrix::W1,
        TargetMatrix::W2,
    ];

    pub const MHA: [TargetMatrix; 4] =
        [TargetMatrix::Wq, TargetMatrix::Wk, TargetMatrix::Wv, TargetMatrix::Wo];

    pub const FFN: [TargetMatrix; 2] = [TargetMatrix::W1, TargetMatrix::W2];

    pub fn for_part(part: UnitPart) -> &'static [TargetMatrix] {
        match part {
            UnitPart::Whole => &Self::ALL,
            UnitPart::Mha => &Self::MHA,
            UnitPart::Ffn => &Self::FFN,
        }
    }

    /// Position within a layer's target arrays.
    pub fn index(self) -> usize {
        match self {
            TargetMatrix::Wq => 0,
            TargetMatrix::Wk => 1,
            TargetMatrix::Wv => 2,
            TargetMatrix::Wo => 3,
            TargetMatrix::W1 => 4,
            TargetMatrix::W2 => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TargetMatrix::Wq => "wq",
            TargetMatrix::Wk => "wk",
            TargetMatrix::Wv => "wv",
            TargetMatrix::Wo => "wo",
            TargetMatrix::W1 => "w1",
            TargetMatrix::W2 => "w2",
        }
    }

    /// (input, output) dimensions in the residual-stream orientation.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            TargetMatrix::Wq | TargetMatrix::Wk | TargetMatrix::Wv | TargetMatrix::Wo => {
                (cfg.d_model, cfg.d_model)
            }
            TargetMatrix::W1 => (cfg.d_model, cfg.d_ff),
            TargetMatrix::W2 => (cfg.d_ff, cfg.d_model),
        }
    }
}

/// One layer's frozen projections (input×output) and pre-norm gains.
#[derive(Debug, Clone)]
pub struct LayerBase {
    pub targets: Vec<DenseMatrix>,
    pub attn_gain: Vec<f64>,
    pub ffn_gain: Vec<f64>,
}

impl LayerBase {
    pub fn target(&self, t: TargetMatrix) -> &DenseMatrix {
        &self.targets[t.index()]
    }
}

/// Frozen base parameters; bit-identical across all local training.
#[derive(Debug, Clone)]
pub struct BaseWeights {
    pub embed: DenseMatrix,
    pub layers: Vec<LayerBase>,
    pub final_gain: Vec<f64>,
    pub head: DenseMatrix,
    /// Transposed head, derived, for the backward pass.
    pub head_t: DenseMatrix,
}

/// One LoRA pair: a is rank×in, b is out×rank, update = scaling·b·a.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub scaling: f64,
}

impl LoraAdapter {
    /// Fresh adapter: a ~ N(0, 0.02), b = 0, so the initial update is zero.
    pub fn init<R: Rng>(rng: &mut R, rank: usize, dims: (usize, usize), scaling: f64) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let a = DenseMatrix::from_fn(rank, dims.0, |_, _| normal.sample(rng));
        let b = DenseMatrix::zeros(dims.1, rank);
        LoraAdapter { a, b, scaling }
    }

    /// scaling·(b·a) transposed into the input×output layout.
    pub fn effective_delta_io(&self) -> DenseMatrix {
        let mut d = self.a.matmul_tn(&self.b.transpose());
        d.scale(self.scaling);
        d
    }
}

/// All adapters of one layer, indexed by `TargetMatrix::index`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub targets: Vec<LoraAdapter>,
}

impl LayerAdapters {
    pub fn get(&self, t: TargetMatrix) -> &LoraAdapter {
        &self.targets[t.index()]
    }

    pub fn get_mut(&mut self, t: TargetMatrix) -> &mut LoraAdapter {
        &mut self.targets[t.index()]
    }
}

/// Trainable state: one adapter per layer per target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerAdapters {
                targets: TargetMatrix::ALL
                    .iter()
                    .map(|t| {
                        LoraAdapter::init(&mut rng, cfg.lora_rank, t.dims(cfg), cfg.lora_scaling())
                    })
                    .collect(),
            })
            .collect();
        AdapterSet { layers }
    }
}

/// Folded effective deltas from aggregation, input×output, per layer per
/// target; None until a round first updates that matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub layers: Vec<Vec<Option<DenseMatrix>>>,
}

impl DeltaSet {
    pub fn empty(n_layers: usize) -> Self {
        DeltaSet { layers: vec![vec![None; TargetMatrix::ALL.len()]; n_layers] }
    }

    pub fn get(&self, layer0: usize, t: TargetMatrix) -> Option<&DenseMatrix> {
        self.layers[layer0][t.index()].as_ref()
    }
}

/// One layer's base+delta sums, in both orientations.
#[derive(Debug)]
pub struct MergedLayer {
    pub w: Vec<DenseMatrix>,
    pub wt: Vec<DenseMatrix>,
}

impl MergedLayer {
    pub fn w(&self, t: TargetMatrix) -> &DenseMatrix {
        &self.w[t.index()]
    }

    pub fn wt(&self, t: TargetMatrix) -> &DenseMatrix {
        &self.wt[t.index()]
    }
}

/// Derived cache of base + folded deltas; rebuilt whenever deltas change.
#[derive(Debug)]
pub struct MergedWeights {
    pub layers: Vec<MergedLayer>,
}

impl MergedWeights {
    pub fn build(base: &BaseWeights, deltas: &DeltaSet) -> Self {
        let layers = base
            .layers
            .iter()
            .zip(&deltas.layers)
            .map(|(lb, ld)| {
                let w: Vec<DenseMatrix> = TargetMatrix::ALL
                    .iter()
                    .map(|t| {
                        let mut m = lb.target(*t).clone();
                        if let Some(d) = &ld[t.index()] {
                            m.add_scaled(d, 1.0);
                        }
                        m
                    })
                    .collect();
                let wt = w.iter().map(DenseMatrix::transpose).collect();
                MergedLayer { w, wt }
            })
            .collect();
        MergedWeights { layers }
    }
}

/// A complete model instance. Base weights, deltas, and the merged cache are
/// shared read-only between device replicas; adapters are per-replica.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub base: Arc<BaseWeights>,
    pub deltas: Arc<DeltaSet>,
    pub adapters: AdapterSet,
    merged: Arc<MergedWeights>,
}

impl Model {
    pub fn merged(&self) -> &MergedWeights {
        &self.merged
    }

    /// Replaces the folded deltas and rebuilds the merged cache.
    pub fn set_deltas(&mut self, deltas: DeltaSet) {
        self.merged = Arc::new(MergedWeights::build(&self.base, &deltas));
        self.deltas = Arc::new(deltas);
    }

    /// Reassembles a model from loaded parts (container deserialization).
    pub fn from_parts(
        cfg: ModelConfig,
        base: BaseWeights,
        deltas: DeltaSet,
        adapters: AdapterSet,
    ) -> Self {
        let merged = Arc::new(MergedWeights::build(&base, &deltas));
        Model { cfg, base: Arc::new(base), deltas: Arc::new(deltas), adapters, merged }
    }
}

/// Builds a model with seeded Gaussian base weights (std 0.02 everywhere
/// except the head), unit norm gains, zero-update LoRA adapters, and no
/// folded deltas.
///
/// The head uses std 1/sqrt(d_model). The final RMS norm pins the hidden
/// state to norm sqrt(d_model) and its gains stay frozen at 1, so the head
/// column norms alone set the reachable logit range; at 0.02 the softmax
/// would be stuck near uniform no matter what the adapters learn.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut base_rng = rng::seeded(rng::derive(seed, &[0]));
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| {
        DenseMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut base_rng))
    };

    let embed = draw(cfg.vocab_size, cfg.d_model);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerBase {
            targets: TargetMatrix::ALL
                .iter()
                .map(|t| {
                    let (i, o) = t.dims(cfg);
                    draw(i, o)
                })
                .collect(),
            attn_gain: vec![1.0; cfg.d_model],
            ffn_gain: vec![1.0; cfg.d_model],
        })
        .collect();
    let head_normal =
        Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).expect("valid std");
    let head =
        DenseMatrix::from_fn(cfg.d_model, cfg.vocab_size, |_, _| head_normal.sample(&mut base_rng));
    let head_t = head.transpose();
    let base = BaseWeights { embed, layers, final_gain: vec![1.0; cfg.d_model], head, head_t };

    let adapters = AdapterSet::init(cfg, rng::derive(seed, &[1]));
    let deltas = DeltaSet::empty(cfg.n_layers);
    Ok(Model::from_parts(cfg.clone(), base, deltas, adapters))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
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

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let m1 = init_model(&cfg, 7).unwrap();
        let m2 = init_model(&cfg, 7).unwrap();
        assert_eq!(m1.base.embed, m2.base.embed);
        assert_eq!(m1.base.head, m2.base.head);
        for (a, b) in m1.base.layers.iter().zip(&m2.base.layers) {
            assert_eq!(a.targets, b.targets);
        }
        assert_eq!(m1.adapters, m2.adapters);
        let m3 = init_model(&cfg, 8).unwrap();
        assert_ne!(m1.base.embed, m3.base.embed);
    }

    #[test]
    fn fresh_adapters_contribute_zero() {
        let cfg = tiny_cfg();
        let m = init_model(&cfg, 3).unwrap();
        for layer in &m.adapters.layers {
            for t in TargetMatrix::ALL {
                let ad = layer.get(t);
                assert_eq!(ad.b.max_abs(), 0.0);
                assert_eq!(ad.effective_delta_io().max_abs(), 0.0);
                assert!((ad.scaling - cfg.lora_alpha / cfg.lora_rank as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn effective_delta_matches_naive_product() {
        let mut rng = rng::seeded(4);
        let mut ad = LoraAdapter::init(&mut rng, 2, (8, 16), 2.0);
        ad.b = DenseMatrix::from_fn(16, 2, |i, j| (i as f64 - j as f64) * 0.1);
        let delta = ad.effective_delta_io();
        assert_eq!(delta.rows(), 8);
        assert_eq!(delta.cols(), 16);
        for i in 0..8 {
            for o in 0..16 {
                let mut naive = 0.0;
                for r in 0..2 {
                    naive += ad.b.get(o, r) * ad.a.get(r, i);
                }
                assert!((delta.get(i, o) - 2.0 * naive).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 3;
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_cfg();
        cfg.lora_rank = 5;
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_cfg();
        cfg.n_layers = 0;
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn merged_cache_reflects_deltas() {
        let cfg = tiny_cfg();
        let mut m = init_model(&cfg, 1).unwrap();
        let before = m.merged().layers[0].w(TargetMatrix::Wq).clone();
        assert_eq!(&before, m.base.layers[0].target(TargetMatrix::Wq));

        let mut deltas = DeltaSet::empty(cfg.n_layers);
        let bump = DenseMatrix::from_fn(8, 8, |i, j| if i == j { 0.5 } else { 0.0 });
        deltas.layers[0][TargetMatrix::Wq.index()] = Some(bump.clone());
        m.set_deltas(deltas);

        let after = m.merged().layers[0].w(TargetMatrix::Wq);
        for i in 0..8 {
            for j in 0..8 {
                let expect = before.get(i, j) + bump.get(i, j);
                assert!((after.get(i, j) - expect).abs() <= 1e-15);
                assert!((m.merged().layers[0].wt(TargetMatrix::Wq).get(j, i) - expect).abs() <= 1e-15);
            }
        }
        // Untouched matrices stay equal to base.
        assert_eq!(m.merged().layers[1].w(TargetMatrix::W1), m.base.layers[1].target(TargetMatrix::W1));
    }
}
