//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and a stream
//! id, so draws are reproducible across platforms and independent of the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids reserved for the different consumers of a seed.
pub mod stream {
    pub const EMBEDDING: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const GATES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const INSTANCE: u64 = 6;
}

pub fn keyed(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
