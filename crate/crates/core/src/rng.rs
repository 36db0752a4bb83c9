//! Seeding rule shared by every stochastic component.
//!
//! All randomness comes from ChaCha8 ([`rand_chacha::ChaCha8Rng`]). A run seed
//! `s` is expanded into the 256-bit key with `SeedableRng::seed_from_u64(s)`
//! (PCG32 expansion, as documented by `rand_core`), and independent streams
//! for trajectory `i`, episode `i`, etc. are selected with `set_stream(i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type VocRng = ChaCha8Rng;

pub fn rng_for(seed: u64, stream: u64) -> VocRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reserved stream ids so that unrelated consumers of the same seed never overlap.
pub mod streams {
    pub const TRAINING: u64 = 1 << 40;
    pub const KMEANS: u64 = 2 << 40;
    pub const INIT: u64 = 3 << 40;
    pub const EVAL: u64 = 4 << 40;
    pub const MPC: u64 = 5 << 40;
    pub const PEEK: u64 = 6 << 40;
}
