//! Forward pass: embedding, pre-norm residual sublayers (causal MHA, SiLU
//! FFN) with LoRA on every projection, final norm, head. Skipped units are
//! identity on the residual stream. Optionally captures post-unit activations
//! at the plan's granularity and a full trace for the backward pass.

use crate::linalg::DenseMatrix;
use crate::similarity::ActivationSet;
use crate::units::{PruneMode, SubmodelPlan, UnitId};

use super::{LoraAdapter, MergedLayer, Model, ModelConfig, ModelError, TargetMatrix, NORM_EPS};

/// A batch of token sequences with next-token targets, row-major batch×seq.
#[derive(Debug, Clone)]
pub struct Batch {
    batch: usize,
    seq: usize,
    inputs: Vec<u32>,
    targets: Vec<u32>,
}

impl Batch {
    pub fn new(
        batch: usize,
        seq: usize,
        inputs: Vec<u32>,
        targets: Vec<u32>,
    ) -> Result<Self, ModelError> {
        if batch == 0 || seq == 0 {
            return Err(ModelError::BadBatch("batch and seq must be >= 1".into()));
        }
        if inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(ModelError::BadBatch(format!(
                "expected {} ids, got {} inputs / {} targets",
                batch * seq,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Batch { batch, seq, inputs, targets })
    }

    /// Splits full sequences (length seq+1) into an input/target pair batch.
    pub fn from_sequences(sequences: &[&[u32]]) -> Result<Self, ModelError> {
        if sequences.is_empty() {
            return Err(ModelError::BadBatch("no sequences".into()));
        }
        let full = sequences[0].len();
        if full < 2 {
            return Err(ModelError::BadBatch("sequences must have length >= 2".into()));
        }
        let seq = full - 1;
        let mut inputs = Vec::with_capacity(sequences.len() * seq);
        let mut targets = Vec::with_capacity(sequences.len() * seq);
        for s in sequences {
            if s.len() != full {
                return Err(ModelError::BadBatch("ragged sequence lengths".into()));
            }
            inputs.extend_from_slice(&s[..seq]);
            targets.extend_from_slice(&s[1..]);
        }
        Batch::new(sequences.len(), seq, inputs, targets)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// Total token count batch·seq = rows of the flattened stream.
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }

    pub fn input(&self, b: usize, t: usize) -> u32 {
        self.inputs[b * self.seq + t]
    }

    pub fn target_at(&self, row: usize) -> u32 {
        self.targets[row]
    }

    fn check_vocab(&self, vocab: usize) -> Result<(), ModelError> {
        for &tok in self.inputs.iter().chain(&self.targets) {
            if tok as usize >= vocab {
                return Err(ModelError::TokenOutOfRange { token: tok, vocab });
            }
        }
        Ok(())
    }
}

/// Logits (batch·seq)×vocab plus captured activations when requested.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: DenseMatrix,
    pub activations: Option<ActivationSet>,
}

// Backward-pass trace: every intermediate the gradient computation reuses.

pub(super) struct MhaTrace {
    pub x_in: DenseMatrix,
    pub xn: DenseMatrix,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Per (sequence, head) causal softmax rows, batch·heads entries of T×T.
    pub probs: Vec<DenseMatrix>,
    /// Head-concatenated attention output before the wo projection.
    pub att: DenseMatrix,
    pub p_q: DenseMatrix,
    pub p_k: DenseMatrix,
    pub p_v: DenseMatrix,
    pub p_o: DenseMatrix,
}

pub(super) struct FfnTrace {
    pub x_in: DenseMatrix,
    pub xn: DenseMatrix,
    pub h_pre: DenseMatrix,
    pub h_act: DenseMatrix,
    pub p_1: DenseMatrix,
    pub p_2: DenseMatrix,
}

pub(super) enum SublayerTrace {
    Mha(MhaTrace),
    Ffn(FfnTrace),
}

pub(super) struct ForwardTrace {
    /// Executed sublayers in order: (0-based layer, trace).
    pub sublayers: Vec<(usize, SublayerTrace)>,
    pub x_final: DenseMatrix,
    pub logits: DenseMatrix,
}

/// Runs the submodel on a batch. With `capture`, also returns post-unit
/// residual-stream states at the plan's granularity (index 0 = embedding
/// output; skipped units repeat the unchanged stream).
pub fn forward(
    model: &Model,
    plan: &SubmodelPlan,
    batch: &Batch,
    capture: bool,
) -> Result<ForwardPass, ModelError> {
    let (logits, captured, _) = run(model, plan, batch, capture, false)?;
    let activations = match captured {
        Some(states) => Some(
            ActivationSet::new(states)
                .map_err(|e| ModelError::BadBatch(format!("activation capture: {e}")))?,
        ),
        None => None,
    };
    Ok(ForwardPass { logits, activations })
}

pub(super) fn forward_traced(
    model: &Model,
    plan: &SubmodelPlan,
    batch: &Batch,
) -> Result<ForwardTrace, ModelError> {
    let (_, _, trace) = run(model, plan, batch, false, true)?;
    Ok(trace.expect("trace requested"))
}

fn run(
    model: &Model,
    plan: &SubmodelPlan,
    batch: &Batch,
    capture: bool,
    trace: bool,
) -> Result<(DenseMatrix, Option<Vec<DenseMatrix>>, Option<ForwardTrace>), ModelError> {
    let cfg = &model.cfg;
    batch.check_vocab(cfg.vocab_size)?;
    for unit in &plan.units {
        if unit.layer < 1 || unit.layer > cfg.n_layers {
            return Err(ModelError::PlanUnitOutOfRange {
                layer: unit.layer,
                n_layers: cfg.n_layers,
            });
        }
    }

    let m = batch.tokens();
    let mut x = DenseMatrix::zeros(m, cfg.d_model);
    for b in 0..batch.batch() {
        for t in 0..batch.seq() {
            let row = b * batch.seq() + t;
            x.row_mut(row).copy_from_slice(model.base.embed.row(batch.input(b, t) as usize));
        }
    }

    let mut captured: Option<Vec<DenseMatrix>> = capture.then(|| vec![x.clone()]);
    let mut sublayers: Vec<(usize, SublayerTrace)> = Vec::new();

    for layer in 1..=cfg.n_layers {
        let layer0 = layer - 1;
        let run_mha = plan.contains(UnitId::whole(layer)) || plan.contains(UnitId::mha(layer));
        let run_ffn = plan.contains(UnitId::whole(layer)) || plan.contains(UnitId::ffn(layer));

        if run_mha {
            let (y, t) = mha_sublayer(cfg, &model.merged().layers[layer0], model, layer0, &x, batch);
            if trace {
                sublayers.push((layer0, SublayerTrace::Mha(t)));
            }
            x = y;
        }
        if capture && plan.mode == PruneMode::Component {
            captured.as_mut().expect("capture on").push(x.clone());
        }

        if run_ffn {
            let (y, t) = ffn_sublayer(cfg, &model.merged().layers[layer0], model, layer0, &x);
            if trace {
                sublayers.push((layer0, SublayerTrace::Ffn(t)));
            }
            x = y;
        }
        if capture {
            captured.as_mut().expect("capture on").push(x.clone());
        }
    }

    let xf = rmsnorm(&x, &model.base.final_gain);
    let logits = xf.matmul(&model.base.head);

    let trace_out = trace.then(|| ForwardTrace {
        sublayers,
        x_final: x,
        logits: logits.clone(),
    });
    Ok((logits, captured, trace_out))
}

/// Row-wise RMS normalization with per-channel gain.
pub(super) fn rmsnorm(x: &DenseMatrix, gain: &[f64]) -> DenseMatrix {
    let d = x.cols();
    let mut y = DenseMatrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (o, (&v, &g)) in y.row_mut(r).iter_mut().zip(row.iter().zip(gain)) {
            *o = v * g * inv;
        }
    }
    y
}

pub(super) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// y = x·w + scaling·(x·aᵀ)·bᵀ; returns y and the intermediate p = x·aᵀ.
pub(super) fn lora_project(
    x: &DenseMatrix,
    w: &DenseMatrix,
    ad: &LoraAdapter,
) -> (DenseMatrix, DenseMatrix) {
    let mut y = x.matmul(w);
    let p = x.matmul_nt(&ad.a);
    y.add_scaled(&p.matmul_nt(&ad.b), ad.scaling);
    (y, p)
}

fn mha_sublayer(
    cfg: &ModelConfig,
    merged: &MergedLayer,
    model: &Model,
    layer0: usize,
    x: &DenseMatrix,
    batch: &Batch,
) -> (DenseMatrix, MhaTrace) {
    let ad = &model.adapters.layers[layer0];
    let base = &model.base.layers[layer0];
    let xn = rmsnorm(x, &base.attn_gain);

    let (q, p_q) = lora_project(&xn, merged.w(TargetMatrix::Wq), ad.get(TargetMatrix::Wq));
    let (k, p_k) = lora_project(&xn, merged.w(TargetMatrix::Wk), ad.get(TargetMatrix::Wk));
    let (v, p_v) = lora_project(&xn, merged.w(TargetMatrix::Wv), ad.get(TargetMatrix::Wv));

    let (bsz, t_len, heads, dh) = (batch.batch(), batch.seq(), cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut att = DenseMatrix::zeros(x.rows(), cfg.d_model);
    let mut probs = Vec::with_capacity(bsz * heads);

    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            let mut p = DenseMatrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let qrow = &q.row(b * t_len + i)[off..off + dh];
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let krow = &k.row(b * t_len + j)[off..off + dh];
                    let s: f64 =
                        qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for cell in prow.iter_mut().take(i + 1) {
                    *cell = (*cell - max).exp();
                    total += *cell;
                }
                for cell in prow.iter_mut().take(i + 1) {
                    *cell /= total;
                }
            }
            for i in 0..t_len {
                let prow = p.row(i).to_vec();
                let out = &mut att.row_mut(b * t_len + i)[off..off + dh];
                for (j, &w) in prow.iter().enumerate().take(i + 1) {
                    let vrow = &v.row(b * t_len + j)[off..off + dh];
                    for (acc, &val) in out.iter_mut().zip(vrow) {
                        *acc += w * val;
                    }
                }
            }
            probs.push(p);
        }
    }

    let (y, p_o) = lora_project(&att, merged.w(TargetMatrix::Wo), ad.get(TargetMatrix::Wo));
    let mut out = x.clone();
    out.add_scaled(&y, 1.0);
    let trace =
        MhaTrace { x_in: x.clone(), xn, q, k, v, probs, att, p_q, p_k, p_v, p_o };
    (out, trace)
}

fn ffn_sublayer(
    cfg: &ModelConfig,
    merged: &MergedLayer,
    model: &Model,
    layer0: usize,
    x: &DenseMatrix,
) -> (DenseMatrix, FfnTrace) {
    let _ = cfg;
    let ad = &model.adapters.layers[layer0];
    let base = &model.base.layers[layer0];
    let xn = rmsnorm(x, &base.ffn_gain);

    let (h_pre, p_1) = lora_project(&xn, merged.w(TargetMatrix::W1), ad.get(TargetMatrix::W1));
    let mut h_act = h_pre.clone();
    for v in h_act.values_mut() {
        *v *= sigmoid(*v);
    }
    let (y, p_2) = lora_project(&h_act, merged.w(TargetMatrix::W2), ad.get(TargetMatrix::W2));

    let mut out = x.clone();
    out.add_scaled(&y, 1.0);
    let trace = FfnTrace { x_in: x.clone(), xn, h_pre, h_act, p_1, p_2 };
    (out, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tests::tiny_cfg};
    use rand::Rng;

    fn rand_batch(cfg: &ModelConfig, bsz: usize, seq: usize, seed: u64) -> Batch {
        let mut rng = crate::rng::seeded(seed);
        let ids = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            (0..n).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect::<Vec<u32>>()
        };
        let inputs = ids(bsz * seq, &mut rng);
        let targets = ids(bsz * seq, &mut rng);
        Batch::new(bsz, seq, inputs, targets).unwrap()
    }

    #[test]
    fn empty_plan_is_head_of_normed_embedding() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 5).unwrap();
        let batch = rand_batch(&cfg, 2, 3, 1);
        let plan = SubmodelPlan { units: vec![], mode: PruneMode::Layer };
        let out = forward(&model, &plan, &batch, false).unwrap();

        let mut embed = DenseMatrix::zeros(6, cfg.d_model);
        for b in 0..2 {
            for t in 0..3 {
                embed
                    .row_mut(b * 3 + t)
                    .copy_from_slice(model.base.embed.row(batch.input(b, t) as usize));
            }
        }
        let expect = rmsnorm(&embed, &model.base.final_gain).matmul(&model.base.head);
        for r in 0..6 {
            for c in 0..cfg.vocab_size {
                assert!((out.logits.get(r, c) - expect.get(r, c)).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn fresh_adapters_do_not_change_logits() {
        let cfg = tiny_cfg();
        let base_seed = 11;
        let m1 = init_model(&cfg, base_seed).unwrap();
        let mut m2 = init_model(&cfg, base_seed).unwrap();
        // Different adapter randomness, same base: with b = 0 the LoRA path
        // contributes exactly zero.
        m2.adapters = crate::model::AdapterSet::init(&cfg, 999);
        let batch = rand_batch(&cfg, 2, 4, 3);
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let l1 = forward(&m1, &plan, &batch, false).unwrap().logits;
        let l2 = forward(&m2, &plan, &batch, false).unwrap().logits;
        for (a, b) in l1.values().iter().zip(l2.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nonzero_b_changes_logits() {
        let cfg = tiny_cfg();
        let m1 = init_model(&cfg, 11).unwrap();
        let mut m2 = m1.clone();
        let ad = m2.adapters.layers[0].get_mut(TargetMatrix::Wq);
        ad.b = DenseMatrix::from_fn(8, 2, |i, j| 0.1 * (i + j + 1) as f64);
        let batch = rand_batch(&cfg, 2, 4, 3);
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let l1 = forward(&m1, &plan, &batch, false).unwrap().logits;
        let l2 = forward(&m2, &plan, &batch, false).unwrap().logits;
        assert!(l1.values().iter().zip(l2.values()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 2).unwrap();
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let seq = 5;
        let base = rand_batch(&cfg, 1, seq, 7);
        let mut tampered_inputs: Vec<u32> = (0..seq).map(|t| base.input(0, t)).collect();
        tampered_inputs[seq - 1] = (tampered_inputs[seq - 1] + 1) % cfg.vocab_size as u32;
        let tampered =
            Batch::new(1, seq, tampered_inputs, (0..seq).map(|r| base.target_at(r)).collect())
                .unwrap();

        let l1 = forward(&model, &plan, &base, false).unwrap().logits;
        let l2 = forward(&model, &plan, &tampered, false).unwrap().logits;
        for r in 0..seq - 1 {
            for c in 0..cfg.vocab_size {
                assert_eq!(l1.get(r, c), l2.get(r, c), "position {r} saw the future");
            }
        }
        assert!((0..cfg.vocab_size).any(|c| l1.get(seq - 1, c) != l2.get(seq - 1, c)));
    }

    #[test]
    fn capture_counts_follow_mode_and_skipped_units_repeat() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 9).unwrap();
        let batch = rand_batch(&cfg, 2, 3, 5);

        let full_layer = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let acts = forward(&model, &full_layer, &batch, true).unwrap().activations.unwrap();
        assert_eq!(acts.units(), cfg.n_layers);
        assert_eq!(acts.output(0).rows(), 6);
        assert_eq!(acts.output(0).cols(), cfg.d_model);

        let full_comp = SubmodelPlan::full(cfg.n_layers, PruneMode::Component);
        let acts = forward(&model, &full_comp, &batch, true).unwrap().activations.unwrap();
        assert_eq!(acts.units(), 2 * cfg.n_layers);

        // Layer 2 skipped: its post-unit state equals layer 1's, bit-exact.
        let partial = SubmodelPlan { units: vec![UnitId::whole(1)], mode: PruneMode::Layer };
        let acts = forward(&model, &partial, &batch, true).unwrap().activations.unwrap();
        assert_eq!(acts.units(), 2);
        assert_eq!(acts.output(1), acts.output(2));
        assert_ne!(acts.output(0), acts.output(1));
    }

    #[test]
    fn component_plan_interleavings_type_check() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 13).unwrap();
        let batch = rand_batch(&cfg, 2, 3, 5);
        // FFN of layer 1 then MHA of layer 2; consecutive MHAs likewise fine.
        for units in [
            vec![UnitId::ffn(1), UnitId::mha(2)],
            vec![UnitId::mha(1), UnitId::mha(2)],
            vec![UnitId::ffn(1), UnitId::ffn(2)],
        ] {
            let plan = SubmodelPlan { units, mode: PruneMode::Component };
            let out = forward(&model, &plan, &batch, false).unwrap();
            assert_eq!(out.logits.rows(), 6);
            assert_eq!(out.logits.cols(), cfg.vocab_size);
            assert!(out.logits.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_out_of_range_plan_and_tokens() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 1).unwrap();
        let batch = rand_batch(&cfg, 1, 2, 0);
        let plan = SubmodelPlan { units: vec![UnitId::whole(3)], mode: PruneMode::Layer };
        assert!(matches!(
            forward(&model, &plan, &batch, false),
            Err(ModelError::PlanUnitOutOfRange { layer: 3, n_layers: 2 })
        ));

        let bad = Batch::new(1, 2, vec![0, 99], vec![1, 2]).unwrap();
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        assert!(matches!(
            forward(&model, &plan, &bad, false),
            Err(ModelError::TokenOutOfRange { token: 99, .. })
        ));
    }

    #[test]
    fn batch_from_sequences_shifts_targets() {
        let seqs: Vec<&[u32]> = vec![&[3, 5, 7, 9], &[1, 2, 3, 4]];
        let b = Batch::from_sequences(&seqs).unwrap();
        assert_eq!(b.batch(), 2);
        assert_eq!(b.seq(), 3);
        assert_eq!(b.input(0, 0), 3);
        assert_eq!(b.target_at(0), 5);
        assert_eq!(b.input(1, 2), 3);
        assert_eq!(b.target_at(5), 4);
        assert!(Batch::from_sequences(&[&[1u32][..]]).is_err());
        assert!(Batch::from_sequences(&[&[1u32, 2][..], &[1, 2, 3][..]]).is_err());
    }
}
