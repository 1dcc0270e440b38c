//! Deterministic seed derivation.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the
//! master seed plus a stream number, so adding a consumer never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Streams reserved for pipeline stages; per-item streams are offset from
/// these.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const EXPLORE: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const SUBSET: u64 = 7;
    pub const TRAJECTORY: u64 = 1 << 32;
}
