//! Desk-scale simulation of memory-constrained federated fine-tuning with
//! similarity-driven layer pruning.
//!
//! The pipeline, per federated round: each participating device probes a toy
//! decoder-only transformer on a batch of its own data, builds a CKA
//! similarity matrix over the model's prunable units, spectrally partitions
//! the units into as many groups as its memory budget affords, samples one
//! representative per group by importance-weighted softmax, fine-tunes LoRA
//! adapters on that submodel, and ships the adapters back. The server stacks
//! the partial updates (data-weighted), folds them into per-matrix effective
//! deltas, and re-issues fresh adapters for the next round.
//!
//! Everything is seeded and deterministic, including parallel device
//! execution; all numerics are f64.

pub mod aggregate;
pub mod data;
pub mod fed;
pub mod grouping;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod records;
pub mod rng;
pub mod selection;
pub mod similarity;
pub mod units;
