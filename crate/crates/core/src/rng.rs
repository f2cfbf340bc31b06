//! Seed handling. Every run derives independent ChaCha8 substreams from one
//! seed so that, for instance, switching dropout off does not shift the
//! order of training batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dataset = 0,
    Init = 1,
    EncoderInit = 2,
    Shuffle = 3,
    Dropout = 4,
    Probe = 5,
}

pub fn substream(seed: u64, stream: Stream) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
