//! Seeded, counter-based random streams.
//!
//! Every pixel, ray or worker that needs randomness owns a stream derived
//! from `(seed, purpose, index)`, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Trace = 1,
    Render = 2,
    Batch = 3,
    Init = 4,
    Dataset = 5,
    Augment = 6,
    Misc = 7,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}
