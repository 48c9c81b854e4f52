//! Seed derivation. Every random draw in the simulator comes from a
//! `ChaCha8Rng` seeded from a base seed plus a stream path, so no generator
//! state is ever shared between components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod stream {
    pub const DATA_POOL: u64 = 1;
    pub const LONG_TAIL: u64 = 2;
    pub const SPLIT_TEST: u64 = 3;
    pub const SPLIT_AUX: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const UNLABELED: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const SELECT: u64 = 8;
    pub const LOCAL_TRAIN: u64 = 9;
    pub const FINE_TUNE: u64 = 10;
    pub const CALIBRATE: u64 = 11;
    pub const DISTILL: u64 = 12;
    pub const ROUNDS: u64 = 13;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}
