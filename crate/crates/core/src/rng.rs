//! Reproducible random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`).
//! The 64-bit user seed is expanded into the 256-bit ChaCha key by
//! `SeedableRng::seed_from_u64`, and independent streams are selected with
//! ChaCha's 64-bit stream id. Replica `r` of an ensemble always uses stream
//! `r`, so results do not depend on how replicas are scheduled on threads.
//!
//! The limit-SDE samplers reserve disjoint stream ranges for their noises
//! (see [`NoiseSource`]) so that linked seeds give independent Brownian motions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Generator for replica `replica` under `seed`.
pub fn replica_rng(seed: u64, replica: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Independent Brownian drivers of the limit processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    /// `B1`, drives `U`.
    B1,
    /// `B2`, the third-order noise of compartment 2.
    B2,
    /// `W1`, drives `V`.
    W1,
}

impl NoiseSource {
    fn tag(self) -> u64 {
        match self {
            NoiseSource::B1 => 1,
            NoiseSource::B2 => 2,
            NoiseSource::W1 => 3,
        }
    }
}

/// Stream for one noise of one SDE replica. The top two bits carry the
/// source tag so these never collide with the population-replica streams
/// used under the same seed.
pub fn noise_rng(seed: u64, replica: u64, source: NoiseSource) -> SimRng {
    debug_assert!(replica < 1 << 62);
    replica_rng(seed, (source.tag() << 62) | replica)
}
