//! Per-purpose seed derivation.
//!
//! Every random stream in a run is derived from the single run seed and a
//! label, so adding a new consumer never perturbs the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::fnv1a64;

pub fn derive(seed: u64, label: &str) -> u64 {
    seed ^ fnv1a64(label.as_bytes())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    rng(derive(seed, label))
}
