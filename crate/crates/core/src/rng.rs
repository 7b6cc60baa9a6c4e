//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from the
//! experiment seed plus a tag path, so results never depend on the order in
//! which clients or tasks are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Kept distinct so two purposes never share a stream.
pub mod tag {
    pub const ENCODER_INIT: u64 = 0x01;
    pub const DECODER_INIT: u64 = 0x02;
    pub const TRAIN_DATA: u64 = 0x03;
    pub const VALIDATION_DATA: u64 = 0x04;
    pub const CLIENT_ROUND: u64 = 0x05;
    pub const PARTITION: u64 = 0x06;
    pub const LATENT_MAP: u64 = 0x07;
    pub const TASK_HEAD: u64 = 0x08;
    pub const NOISE: u64 = 0x09;
    pub const CONVEX: u64 = 0x0a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tag path into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
