//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream tag (splitmix64 finaliser).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    rng(derive(seed, stream))
}

/// Stream tags used across the crate. Keeping them in one place avoids two
/// subsystems accidentally sharing a random stream.
pub mod streams {
    pub const SHUFFLE: u64 = 1;
    pub const RESET: u64 = 2;
    pub const RANDOM_MASK: u64 = 3;
    pub const RANDOM_NOISE: u64 = 4;
    pub const FORGET_CYCLE: u64 = 5;
    pub const RETRAIN_INIT: u64 = 6;
    pub const SYNTH_TEMPLATES: u64 = 7;
    pub const SYNTH_IMAGES: u64 = 8;
    pub const SYNTH_SPLIT: u64 = 9;
}
