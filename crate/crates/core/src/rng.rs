//! Deterministic random streams.
//!
//! Every random draw in the crate goes through [`SeedRng`], so a seed fully
//! determines initialization and sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeedRng = ChaCha8Rng;

/// Independent stream for `(seed, stream)`; distinct streams never overlap.
pub fn stream(seed: u64, stream: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
