//! Reproducible random streams.
//!
//! Every consumer draws from a ChaCha8 stream keyed by `(seed, stream)`, so
//! replicate `m` of a run sees the same numbers regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream` under master seed `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream used by [`crate::models::simulate`].
pub const TRAJECTORY_STREAM: u64 = 0;
/// Stream of the single reference particle filter run of an experiment.
pub const FILTER_STREAM: u64 = 1;
/// Repeated-sampling replicate `m` uses stream `REPLICATE_BASE + m`.
pub const REPLICATE_BASE: u64 = 1 << 32;
