//! Versioned binary model container: magic, version, JSON header (config +
//! named tensor index), then raw little-endian f64 tensor data in header
//! order. Folded deltas are written only where present; gains are stored as
//! 1×d tensors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;

use super::{
    AdapterSet, BaseWeights, DeltaSet, LayerAdapters, LayerBase, LoraAdapter, Model, ModelConfig,
    ModelError, TargetMatrix,
};

const MAGIC: &[u8; 4] = b"FPMC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("malformed container header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: u64,
    cols: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

fn gain_matrix(gain: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(1, gain.len(), |_, c| gain[c])
}

/// Tensor inventory in serialization order: (name, matrix).
fn inventory(model: &Model) -> Vec<(String, DenseMatrix)> {
    let mut out: Vec<(String, DenseMatrix)> = Vec::new();
    out.push(("embed".into(), model.base.embed.clone()));
    for (layer0, lb) in model.base.layers.iter().enumerate() {
        let l = layer0 + 1;
        for t in TargetMatrix::ALL {
            out.push((format!("layer.{l}.{}", t.label()), lb.target(t).clone()));
        }
        out.push((format!("layer.{l}.attn_gain"), gain_matrix(&lb.attn_gain)));
        out.push((format!("layer.{l}.ffn_gain"), gain_matrix(&lb.ffn_gain)));
    }
    out.push(("final_gain".into(), gain_matrix(&model.base.final_gain)));
    out.push(("head".into(), model.base.head.clone()));
    for (layer0, ld) in model.deltas.layers.iter().enumerate() {
        let l = layer0 + 1;
        for t in TargetMatrix::ALL {
            if let Some(d) = &ld[t.index()] {
                out.push((format!("delta.{l}.{}", t.label()), d.clone()));
            }
        }
    }
    for (layer0, la) in model.adapters.layers.iter().enumerate() {
        let l = layer0 + 1;
        for t in TargetMatrix::ALL {
            let ad = la.get(t);
            out.push((format!("lora.{l}.{}.a", t.label()), ad.a.clone()));
            out.push((format!("lora.{l}.{}.b", t.label()), ad.b.clone()));
        }
    }
    out
}

/// Writes the model to `path` in the container format.
pub fn save_model(model: &Model, path: &Path) -> Result<(), ContainerError> {
    let tensors = inventory(model);
    let header = Header {
        config: model.cfg.clone(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorMeta {
                name: name.clone(),
                rows: m.rows() as u64,
                cols: m.cols() as u64,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, m) in &tensors {
        for v in m.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a container back into a model; the merged cache is rebuilt.
pub fn load_model(path: &Path) -> Result<Model, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let cfg = header.config;
    cfg.validate()?;

    let mut tensors: BTreeMap<String, DenseMatrix> = BTreeMap::new();
    for meta in &header.tensors {
        let (rows, cols) = (meta.rows as usize, meta.cols as usize);
        let mut values = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let m = DenseMatrix::new(rows, cols, values)
            .map_err(|e| ContainerError::BadHeader(format!("tensor {}: {e}", meta.name)))?;
        if tensors.insert(meta.name.clone(), m).is_some() {
            return Err(ContainerError::BadHeader(format!("duplicate tensor {}", meta.name)));
        }
    }

    fn take(
        tensors: &mut BTreeMap<String, DenseMatrix>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<DenseMatrix, ContainerError> {
        let m = tensors
            .remove(name)
            .ok_or_else(|| ContainerError::BadHeader(format!("missing tensor {name}")))?;
        if m.rows() != rows || m.cols() != cols {
            return Err(ContainerError::BadHeader(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    let embed = take(&mut tensors, "embed", cfg.vocab_size, cfg.d_model)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        let mut targets = Vec::with_capacity(TargetMatrix::ALL.len());
        for t in TargetMatrix::ALL {
            let (i, o) = t.dims(&cfg);
            targets.push(take(&mut tensors, &format!("layer.{l}.{}", t.label()), i, o)?);
        }
        let attn_gain =
            take(&mut tensors, &format!("layer.{l}.attn_gain"), 1, cfg.d_model)?.row(0).to_vec();
        let ffn_gain =
            take(&mut tensors, &format!("layer.{l}.ffn_gain"), 1, cfg.d_model)?.row(0).to_vec();
        layers.push(LayerBase { targets, attn_gain, ffn_gain });
    }
    let final_gain = take(&mut tensors, "final_gain", 1, cfg.d_model)?.row(0).to_vec();
    let head = take(&mut tensors, "head", cfg.d_model, cfg.vocab_size)?;
    let head_t = head.transpose();
    let base = BaseWeights { embed, layers, final_gain, head, head_t };

    let mut deltas = DeltaSet::empty(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        for t in TargetMatrix::ALL {
            let name = format!("delta.{l}.{}", t.label());
            if tensors.contains_key(&name) {
                let (i, o) = t.dims(&cfg);
                deltas.layers[l - 1][t.index()] = Some(take(&mut tensors, &name, i, o)?);
            }
        }
    }

    let mut adapter_layers = Vec::with_capacity(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        let mut targets = Vec::with_capacity(TargetMatrix::ALL.len());
        for t in TargetMatrix::ALL {
            let (i, o) = t.dims(&cfg);
            let a = take(&mut tensors, &format!("lora.{l}.{}.a", t.label()), cfg.lora_rank, i)?;
            let b = take(&mut tensors, &format!("lora.{l}.{}.b", t.label()), o, cfg.lora_rank)?;
            targets.push(LoraAdapter { a, b, scaling: cfg.lora_scaling() });
        }
        adapter_layers.push(LayerAdapters { targets });
    }

    if let Some(name) = tensors.keys().next() {
        return Err(ContainerError::BadHeader(format!("unexpected tensor {name}")));
    }

    Ok(Model::from_parts(cfg, base, deltas, AdapterSet { layers: adapter_layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward, Batch};
    use crate::model::{init_model, tests::tiny_cfg};
    use crate::units::{PruneMode, SubmodelPlan};
    use rand::Rng;

    #[test]
    fn round_trip_preserves_forward_bits() {
        let cfg = tiny_cfg();
        let mut model = init_model(&cfg, 31).unwrap();
        // Install a delta and a nonzero b so every code path serializes.
        let mut deltas = DeltaSet::empty(cfg.n_layers);
        deltas.layers[1][TargetMatrix::W2.index()] =
            Some(DenseMatrix::from_fn(cfg.d_ff, cfg.d_model, |i, j| (i + j) as f64 * 1e-3));
        model.set_deltas(deltas);
        model.adapters.layers[0].get_mut(TargetMatrix::Wv).b =
            DenseMatrix::from_fn(cfg.d_model, cfg.lora_rank, |i, j| (i * 2 + j) as f64 * 0.01);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();

        assert_eq!(model.cfg, loaded.cfg);
        assert_eq!(model.base.embed, loaded.base.embed);
        assert_eq!(model.adapters, loaded.adapters);
        assert_eq!(*model.deltas, *loaded.deltas);

        let mut rng = crate::rng::seeded(2);
        let ids: Vec<u32> = (0..8).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let batch = Batch::new(2, 4, ids.clone(), ids).unwrap();
        let plan = SubmodelPlan::full(cfg.n_layers, PruneMode::Layer);
        let a = forward(&model, &plan, &batch, false).unwrap().logits;
        let b = forward(&loaded, &plan, &batch, false).unwrap().logits;
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_model(&path), Err(ContainerError::BadMagic)));

        let cfg = tiny_cfg();
        let model = init_model(&cfg, 1).unwrap();
        let good = dir.path().join("good.bin");
        save_model(&model, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 9;
        let tampered = dir.path().join("tampered.bin");
        std::fs::write(&tampered, &bytes).unwrap();
        assert!(matches!(load_model(&tampered), Err(ContainerError::BadVersion(9))));
    }

    #[test]
    fn truncated_file_errors_cleanly() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&cut), Err(ContainerError::Io(_))));
    }
}
