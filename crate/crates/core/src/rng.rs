//! Named RNG substreams.
//!
//! A run owns one master seed. Initialization, data sampling and
//! everything else (diagnostic sampling, feature rotation) draw from
//! separate ChaCha streams so that two runs differing only in whether the
//! head is trained consume identical data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Misc = 3,
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Plain seeded generator for tests and one-off oracles.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
