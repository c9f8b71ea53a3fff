//! Deterministic seed derivation. Every stochastic choice in the pipeline
//! draws from a generator seeded by mixing a global seed with the indices
//! that identify the choice (epoch, clip, stream), so no RNG is shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit hash of a string id (FNV-1a).
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}

/// Stream tags keeping independent draws apart.
pub mod stream {
    pub const PART: u64 = 1;
    pub const MASK: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const IDENTITY: u64 = 5;
    pub const REAL: u64 = 6;
    pub const FORGERY: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const EPISODE: u64 = 9;
    pub const FRAMES: u64 = 10;
    pub const EVAL_MASK: u64 = 11;
}
