//! Seed splitting. One run seed feeds every module; each consumer gets its
//! own ChaCha stream so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synth = 1,
    Init = 2,
    HeadInit = 3,
    Dropout = 4,
    Probe = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
