//! Deterministic derivation of independent RNG streams from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(base, tag, index)` into a fresh 64-bit seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ tag) ^ index)
}

/// An RNG for stream `(tag, index)` under `base`.
pub fn stream(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

// Stream tags. Every consumer of randomness uses its own tag so that adding
// draws in one place never shifts another.
pub const TAG_CORPUS_DOC: u64 = 1;
pub const TAG_INIT: u64 = 2;
pub const TAG_TEXT_TABLE: u64 = 3;
pub const TAG_TRAIN_STEP: u64 = 4;
pub const TAG_FINETUNE_STEP: u64 = 5;
pub const TAG_SPLIT: u64 = 6;
