//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream derived from a 64-bit
//! seed, so results do not depend on platform or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for one individual: `run_seed ⊕ individual_id`.
pub fn individual_stream(run_seed: u64, individual_id: u64) -> Rng {
    seeded(run_seed ^ individual_id)
}
