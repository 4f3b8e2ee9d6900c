//! Mean token cross-entropy and exact gradients for the LoRA parameters of
//! plan units. Base weights are frozen, so the backward pass only propagates
//! activation gradients plus the rank-r factor gradients; everything else is
//! untouched by construction.

use crate::linalg::DenseMatrix;
use crate::units::{SubmodelPlan, UnitId, UnitPart};

use super::forward::{forward_traced, sigmoid, Batch, FfnTrace, MhaTrace, SublayerTrace};
use super::{LoraAdapter, Model, ModelError, TargetMatrix, NORM_EPS};

/// Gradient of one adapter pair.
#[derive(Debug, Clone)]
pub struct TargetGrad {
    pub target: TargetMatrix,
    pub da: DenseMatrix,
    pub db: DenseMatrix,
}

/// Gradients for all adapted matrices of one plan unit.
#[derive(Debug, Clone)]
pub struct UnitGrads {
    pub unit: UnitId,
    pub targets: Vec<TargetGrad>,
}

/// Gradient set covering exactly the plan's units, in plan order.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub units: Vec<UnitGrads>,
}

impl LoraGrads {
    fn new(plan: &SubmodelPlan) -> Self {
        let units = plan
            .units
            .iter()
            .map(|&unit| UnitGrads {
                unit,
                targets: TargetMatrix::for_part(unit.part)
                    .iter()
                    .map(|&t| TargetGrad {
                        target: t,
                        da: DenseMatrix::zeros(0, 0),
                        db: DenseMatrix::zeros(0, 0),
                    })
                    .collect(),
            })
            .collect();
        LoraGrads { units }
    }

    fn slot(&mut self, unit_idx: usize, target: TargetMatrix) -> &mut TargetGrad {
        self.units[unit_idx]
            .targets
            .iter_mut()
            .find(|g| g.target == target)
            .expect("target belongs to unit part")
    }
}

/// Mean next-token cross-entropy and LoRA gradients over the plan's units.
pub fn loss_and_grads(
    model: &Model,
    plan: &SubmodelPlan,
    batch: &Batch,
) -> Result<(f64, LoraGrads), ModelError> {
    let trace = forward_traced(model, plan, batch)?;
    let m = batch.tokens();

    // Softmax + cross-entropy on the logits; dlogits = (p - onehot)/m.
    let vocab = model.cfg.vocab_size;
    let mut dlogits = DenseMatrix::zeros(m, vocab);
    let mut loss = 0.0;
    for r in 0..m {
        let row = trace.logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut total = 0.0;
        for &v in row {
            total += (v - max).exp();
        }
        let log_total = total.ln() + max;
        let target = batch.target_at(r) as usize;
        loss += log_total - row[target];
        let drow = dlogits.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            drow[c] = ((v - max).exp() / total) / m as f64;
        }
        drow[target] -= 1.0 / m as f64;
    }
    loss /= m as f64;

    // Head and final norm (both frozen: only activation gradients flow).
    let dxf = dlogits.matmul(&model.base.head_t);
    let mut dx = rmsnorm_backward(&trace.x_final, &dxf, &model.base.final_gain);

    // Map each executed sublayer to its owning plan unit.
    let mut grads = LoraGrads::new(plan);
    let owner = |layer0: usize, part: UnitPart| -> usize {
        plan.units
            .iter()
            .position(|u| {
                u.layer == layer0 + 1 && (u.part == part || u.part == UnitPart::Whole)
            })
            .expect("executed sublayer belongs to a plan unit")
    };

    for (layer0, sub) in trace.sublayers.iter().rev() {
        match sub {
            SublayerTrace::Ffn(t) => {
                let idx = owner(*layer0, UnitPart::Ffn);
                dx = ffn_backward(model, *layer0, t, &dx, &mut grads, idx);
            }
            SublayerTrace::Mha(t) => {
                let idx = owner(*layer0, UnitPart::Mha);
                dx = mha_backward(model, *layer0, t, &dx, batch, &mut grads, idx);
            }
        }
    }

    Ok((loss, grads))
}

/// dL/dx for y = g ⊙ x / rms(x): per row,
/// dx_k = inv·g_k·dy_k − (inv³/D)·x_k·Σ_j dy_j·g_j·x_j.
fn rmsnorm_backward(x: &DenseMatrix, dy: &DenseMatrix, gain: &[f64]) -> DenseMatrix {
    let d = x.cols();
    let mut dx = DenseMatrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ms: f64 = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        let inner: f64 =
            dyr.iter().zip(gain).zip(xr).map(|((&dy, &g), &x)| dy * g * x).sum();
        let coef = inv * inv * inv / d as f64 * inner;
        for (o, ((&dy, &g), &x)) in dx.row_mut(r).iter_mut().zip(dyr.iter().zip(gain).zip(xr)) {
            *o = inv * g * dy - coef * x;
        }
    }
    dx
}

/// Backward through y = x·w + s·(x·aᵀ)·bᵀ: returns dx, accumulates da/db.
fn lora_project_backward(
    dy: &DenseMatrix,
    x: &DenseMatrix,
    p: &DenseMatrix,
    wt: &DenseMatrix,
    ad: &LoraAdapter,
    slot: &mut TargetGrad,
) -> DenseMatrix {
    let tmp = dy.matmul(&ad.b);
    let mut dx = dy.matmul(wt);
    dx.add_scaled(&tmp.matmul(&ad.a), ad.scaling);
    let mut da = tmp.matmul_tn(x);
    da.scale(ad.scaling);
    let mut db = dy.matmul_tn(p);
    db.scale(ad.scaling);
    slot.da = da;
    slot.db = db;
    dx
}

fn ffn_backward(
    model: &Model,
    layer0: usize,
    t: &FfnTrace,
    dx_out: &DenseMatrix,
    grads: &mut LoraGrads,
    unit_idx: usize,
) -> DenseMatrix {
    let merged = &model.merged().layers[layer0];
    let ad = &model.adapters.layers[layer0];
    let gain = &model.base.layers[layer0].ffn_gain;

    // y = x_in + f(x_in); dy of the additive branch is dx_out itself.
    let d_h_act = lora_project_backward(
        dx_out,
        &t.h_act,
        &t.p_2,
        merged.wt(TargetMatrix::W2),
        ad.get(TargetMatrix::W2),
        grads.slot(unit_idx, TargetMatrix::W2),
    );

    // SiLU'(z) = sig(z)·(1 + z·(1 − sig(z))).
    let mut d_h_pre = d_h_act;
    for (g, &z) in d_h_pre.values_mut().iter_mut().zip(t.h_pre.values()) {
        let s = sigmoid(z);
        *g *= s * (1.0 + z * (1.0 - s));
    }

    let dxn = lora_project_backward(
        &d_h_pre,
        &t.xn,
        &t.p_1,
        merged.wt(TargetMatrix::W1),
        ad.get(TargetMatrix::W1),
        grads.slot(unit_idx, TargetMatrix::W1),
    );

    let mut dx_in = rmsnorm_backward(&t.x_in, &dxn, gain);
    dx_in.add_scaled(dx_out, 1.0);
    dx_in
}

fn mha_backward(
    model: &Model,
    layer0: usize,
    t: &MhaTrace,
    dx_out: &DenseMatrix,
    batch: &Batch,
    grads: &mut LoraGrads,
    unit_idx: usize,
) -> DenseMatrix {
    let cfg = &model.cfg;
    let merged = &model.merged().layers[layer0];
    let ad = &model.adapters.layers[layer0];
    let gain = &model.base.layers[layer0].attn_gain;
    let (bsz, t_len, heads, dh) = (batch.batch(), batch.seq(), cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let d_att = lora_project_backward(
        dx_out,
        &t.att,
        &t.p_o,
        merged.wt(TargetMatrix::Wo),
        ad.get(TargetMatrix::Wo),
        grads.slot(unit_idx, TargetMatrix::Wo),
    );

    let m = dx_out.rows();
    let mut dq = DenseMatrix::zeros(m, cfg.d_model);
    let mut dk = DenseMatrix::zeros(m, cfg.d_model);
    let mut dv = DenseMatrix::zeros(m, cfg.d_model);

    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            let p = &t.probs[b * heads + h];

            // dP[i][j] = dO_i · V_j (j ≤ i); dV_j += Σ_i P[i][j]·dO_i.
            let mut dp = DenseMatrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let dout = &d_att.row(b * t_len + i)[off..off + dh];
                let dprow = dp.row_mut(i);
                for j in 0..=i {
                    let vrow = &t.v.row(b * t_len + j)[off..off + dh];
                    dprow[j] = dout.iter().zip(vrow).map(|(a, b)| a * b).sum();
                }
            }
            for j in 0..t_len {
                let dvrow = &mut dv.row_mut(b * t_len + j)[off..off + dh];
                for i in j..t_len {
                    let w = p.get(i, j);
                    let dout = &d_att.row(b * t_len + i)[off..off + dh];
                    for (acc, &val) in dvrow.iter_mut().zip(dout) {
                        *acc += w * val;
                    }
                }
            }

            // Softmax backward per causal row, then dQ = dS·K/√dh, dK = dSᵀ·Q/√dh.
            let mut ds = DenseMatrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let prow = p.row(i);
                let dprow = dp.row(i);
                let inner: f64 = (0..=i).map(|j| dprow[j] * prow[j]).sum();
                let dsrow = ds.row_mut(i);
                for j in 0..=i {
                    dsrow[j] = prow[j] * (dprow[j] - inner);
                }
            }
            for i in 0..t_len {
                let dsrow = ds.row(i);
                let dqrow = &mut dq.row_mut(b * t_len + i)[off..off + dh];
                for j in 0..=i {
                    let s = dsrow[j] * inv_sqrt;
                    let krow = &t.k.row(b * t_len + j)[off..off + dh];
                    for (acc, &val) in dqrow.iter_mut().zip(krow) {
                        *acc += s * val;
                    }
                }
            }
            for j in 0..t_len {
                let dkrow = &mut dk.row_mut(b * t_len + j)[off..off + dh];
                for i in j..t_len {
                    let s = ds.get(i, j) * inv_sqrt;
                    let qrow = &t.q.row(b * t_len + i)[off..off + dh];
                    for (acc, &val) in dkrow.iter_mut().zip(qrow) {
                        *acc += s * val;
                    }
                }
            }
        }
    }

    let mut dxn = lora_project_backward(
        &dq,
        &t.xn,
        &t.p_q,
        merged.wt(TargetMatrix::Wq),
        ad.get(TargetMatrix::Wq),
        grads.slot(unit_idx, TargetMatrix::Wq),
    );
    dxn.add_scaled(
        &lora_project_backward(
            &dk,
            &t.xn,
            &t.p_k,
            merged.wt(TargetMatrix::Wk),
            ad.get(TargetMatrix::Wk),
            grads.slot(unit_idx, TargetMatrix::Wk),
        ),
        1.0,
    );
    dxn.add_scaled(
        &lora_project_backward(
            &dv,
            &t.xn,
            &t.p_v,
            merged.wt(TargetMatrix::Wv),
            ad.get(TargetMatrix::Wv),
            grads.slot(unit_idx, TargetMatrix::Wv),
        ),
        1.0,
    );

    let mut dx_in = rmsnorm_backward(&t.x_in, &dxn, gain);
    dx_in.add_scaled(dx_out, 1.0);
    dx_in
}
