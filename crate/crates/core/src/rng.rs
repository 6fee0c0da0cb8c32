// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every random choice in the crate is drawn from a [`ChaCha8Rng`] built
//! from an explicit 64-bit seed. ChaCha8 is portable across platforms and
//! word sizes, so a given seed produces the same DFAs, trajectories and
//! prompts everywhere. There is no global or thread-local generator.
//!
//! Independent streams (one per grid cell, per sample, per pair) are keyed
//! with [`derive_seed`], which mixes a base seed with a path of indices.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Builds the crate generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `base` and an index path, e.g. `[row, col, sample]`.
///
/// Distinct paths give unrelated streams; the same path always gives the
/// same seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut acc = mix64(base.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for (depth, &idx) in path.iter().enumerate() {
        acc = mix64(acc ^ mix64(idx.wrapping_add((depth as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))));
    }
    acc
}

/// Deterministic hash of a key path to a float in `[-1, 1)`.
///
/// Used for the synthetic model's seed-derived noise so that activations
/// can be regenerated on demand without storing them.
pub fn hash_unit(seed: u64, path: &[u64]) -> f64 {
    let bits = derive_seed(seed, path) >> 11;
    (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}
