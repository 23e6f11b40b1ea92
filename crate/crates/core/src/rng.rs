//! Seeded random streams.
//!
//! A single experiment seed fans out into independent named streams so that,
//! for example, changing the batch order never changes parameter init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Shuffle,
    Split,
    Reset,
    Probe,
    Baseline,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Shuffle => 3,
            Stream::Split => 4,
            Stream::Reset => 5,
            Stream::Probe => 6,
            Stream::Baseline => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
