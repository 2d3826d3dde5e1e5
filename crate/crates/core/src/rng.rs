//! Seeded random streams.
//!
//! Every consumer derives its generator from a `(seed, stream)` pair, so the draws for
//! edit `t` never depend on how many draws earlier edits made.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as RandomState;

/// Generator for `seed`, positioned on an independent `stream`.
pub fn stream(seed: u64, stream: u64) -> RandomState {
    let mut rng = RandomState::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the engine. Kept distinct so no two consumers share draws.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const CORPUS: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    /// Noise for edit `t` uses `NOISE_BASE + t`.
    pub const NOISE_BASE: u64 = 1 << 32;
    /// Specificity sampling at step `t` uses `EVAL_BASE + t`.
    pub const EVAL_BASE: u64 = 2 << 32;
}
