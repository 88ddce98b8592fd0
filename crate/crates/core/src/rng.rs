//! Seed plumbing. One root seed fans out into independent ChaCha streams so
//! that adding or removing a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Keep these stable: checkpoints and logs depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    InitFine = 1,
    InitCoarse = 2,
    InitEncoder = 3,
    Shuffle = 4,
    Gumbel = 5,
    Crop = 6,
    Synth = 7,
}

pub fn stream(seed: u64, tag: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 56) ^ index);
    rng
}

/// Stream for the Gumbel noise of one window at one optimizer step.
pub fn gumbel_stream(seed: u64, step: u64, window: u64) -> ChaCha8Rng {
    stream(seed, Stream::Gumbel, (step << 24) ^ window)
}
