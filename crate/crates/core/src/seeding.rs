//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! a root seed and a small set of indices, so that any run is reproducible
//! from its seed alone and parallel execution order cannot change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG type used for all sampling in the crate.
pub type RolloutRng = ChaCha8Rng;

/// Mix a seed with a tag (splitmix64 finalizer).
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one unit of work (episode, candidate, cell...).
///
/// Streams with distinct `(seed, index)` pairs never overlap, and the same
/// pair always yields the same stream regardless of which thread runs it.
pub fn substream(seed: u64, index: u64) -> RolloutRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream addressed by two indices, e.g. (outer iteration, episode).
pub fn substream2(seed: u64, a: u64, b: u64) -> RolloutRng {
    substream(mix(seed, a), b)
}
