//! Seed-stream derivation. Every random stream in the crate is keyed by a
//! tuple of (global seed, labels...) hashed with SHA-256, so results do not
//! depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hash a seed and a list of labels into a 64-bit sub-seed.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn stream(seed: u64, labels: &[&str]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}
