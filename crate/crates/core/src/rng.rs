//! Seeded, stream-splittable random number generation.
//!
//! Every stochastic operation takes a [`SeededRng`]. Independent consumers
//! derive their own stream from a base seed so adding draws in one place
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Well-known stream ids.
pub mod streams {
    pub const SCENES: u64 = 1;
    pub const TOY_LANGUAGE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const TRAINING: u64 = 6;
    pub const SAMPLER: u64 = 7;
    pub const ORDER: u64 = 8;
    pub const PROJECTION: u64 = 9;
    pub const EVAL: u64 = 10;
}

/// A generator for `(seed, stream)`. Distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
