//! Deterministic stream derivation: every random draw site gets its own
//! ChaCha stream keyed by `(root seed, labels)`, so adding or removing a
//! consumer never shifts the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a root seed with a list of stream labels into a sub-seed.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ 0x5851f42d4c957f2d);
    for &l in labels {
        s = splitmix64(s ^ splitmix64(l));
    }
    s
}

/// Seeded generator for the stream identified by `labels`.
pub fn stream(root: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, labels))
}

/// Stream label constants, one per draw site.
pub mod label {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const SKETCH: u64 = 5;
    pub const PROBLEM: u64 = 6;
}
