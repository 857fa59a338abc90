//! Seeded random streams.
//!
//! Every run derives independent ChaCha streams from one master seed so
//! that e.g. drawing the output index never perturbs batch sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers split off a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Batches = 0,
    OutputIndex = 1,
    Data = 2,
    Init = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
