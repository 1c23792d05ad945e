//! Seeded random streams.
//!
//! Each consumer inside a run draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers used by the training loop.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const ENCODER_INIT: u64 = 3;
    pub const POLICY_INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const ACTIONS: u64 = 7;
    pub const KMEANS: u64 = 8;
    pub const DISTRIBUTION: u64 = 9;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
