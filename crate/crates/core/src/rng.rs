//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed plus a purpose tag and an index, so actors, evaluators and the
//! learner never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags, kept stable so resolved configs reproduce runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Environment = 1,
    Actor = 2,
    Evaluator = 3,
    Learner = 4,
    Init = 5,
    Warmup = 6,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream for `(seed, purpose, worker, index)`, e.g. one per
/// `(run_seed, actor, episode)` for environments.
pub fn stream(seed: u64, purpose: Stream, worker: u64, index: u64) -> Rng {
    let key = mix(seed ^ mix((purpose as u64) << 48 ^ worker));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
