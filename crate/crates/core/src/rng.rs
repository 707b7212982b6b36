//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit RNG. Workers that process
//! shards concurrently must each own a stream obtained from [`stream`] with a
//! distinct stream id; streams with the same seed and id are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
