//! Seeding rules.
//!
//! Every stochastic routine takes an explicit seed. Work item `k` of a batch
//! (replicate, chain, start) gets its own ChaCha20 stream: the generator is
//! seeded with the batch seed and the stream id is set to `k`. Streams are
//! independent and the mapping does not depend on thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type SimRng = ChaCha20Rng;

pub fn root_rng(seed: u64) -> SimRng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
