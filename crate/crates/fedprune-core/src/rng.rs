//! Seed derivation. Every random decision in the simulator flows from one
//! experiment seed through `derive`, so runs are reproducible and device
//! work is independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes one word into a seed (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a stream of tag words.
///
/// Deterministic, order-sensitive, and well-spread: `derive(s, &[r, d])` is
/// how a device's round RNG is keyed from (experiment seed, round, device id).
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut acc = mix(base);
    for &t in tags {
        acc = mix(acc ^ mix(t));
    }
    acc
}

/// Seeded deterministic RNG used throughout the crate.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
