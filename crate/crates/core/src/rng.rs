//! Counter-indexed random streams.
//!
//! Every sample is drawn from its own ChaCha stream selected by
//! `(seed, domain, index)`, so results do not depend on iteration order or
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains keep unrelated draws with the same seed independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    TrainShapes = 1,
    InterpShapes = 2,
    OodShapes = 3,
    Conditions = 4,
    ModelInit = 5,
    Resample = 6,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((domain as u64) << 56));
    rng.set_stream(index);
    rng
}
