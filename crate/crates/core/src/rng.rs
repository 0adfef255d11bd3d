//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed mixed with a purpose-specific salt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, salt: u64) -> u64 {
    mix(seed ^ mix(salt))
}

pub fn stream(seed: u64, salt: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, salt))
}

pub mod salt {
    pub const CONTENT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MOS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const HEAD_INIT: u64 = 8;
}
