//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is a
//! splitmix64 hash of a base seed and a path of stream labels. Results are
//! therefore independent of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Distinct constants keep unrelated draws decorrelated.
pub mod stream {
    pub const WORKLOAD: u64 = 0x01;
    pub const EMBEDDING: u64 = 0x02;
    pub const SHIFT: u64 = 0x03;
    pub const EVALUATE: u64 = 0x04;
    pub const RANDOM_POLICY: u64 = 0x05;
    pub const TRAIN: u64 = 0x06;
    pub const KMEANS: u64 = 0x07;
    pub const DISTILL: u64 = 0x08;
    pub const LATENCY: u64 = 0x09;
    pub const TRAIN_SET: u64 = 0x10;
    pub const CALIB_SET: u64 = 0x11;
    pub const EVAL_SET: u64 = 0x12;
    pub const LABELS: u64 = 0x13;
    pub const CALIB_RUN: u64 = 0x14;
    pub const EVAL_RUN: u64 = 0x15;
    pub const ABLATION: u64 = 0x16;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash `base` together with `parts` into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
