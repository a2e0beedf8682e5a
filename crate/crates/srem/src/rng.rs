//! Seedable, splittable randomness.
//!
//! Every random draw in the crate flows from one root seed. Substreams are
//! derived from (root, domain, index) so that, e.g., the controls for event k
//! do not depend on how many controls earlier events consumed: changing m
//! re-reads each event's own stream from the start instead of shifting a
//! single global stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep substreams from colliding across subsystems.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    ControlSampling = 1,
    Replication = 2,
    RandomEffects = 3,
    Simulation = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix (root, domain, index) into a substream seed.
pub fn substream_seed(root: u64, domain: Domain, index: u64) -> u64 {
    let mixed = splitmix64(root ^ splitmix64((domain as u64) << 56 ^ index));
    splitmix64(mixed)
}

/// A fresh generator for the given substream.
pub fn substream(root: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, domain, index))
}
