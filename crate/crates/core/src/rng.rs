//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed and a fixed purpose tag, so adding draws in one subsystem never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags; the discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Placement = 1,
    Fading = 2,
    Data = 3,
    ModelInit = 4,
    Training = 5,
    Agent = 6,
    Oracle = 7,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    sub_stream(seed, purpose, 0)
}

/// Stream for a numbered sub-task (an episode, a user, an enumerated action).
pub fn sub_stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(purpose as u64);
    rng
}
