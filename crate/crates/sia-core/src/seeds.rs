//! Labeled seed derivation.
//!
//! One global seed fans out to every randomized component through
//! `derive_seed(global, label)`: the label is hashed together with the seed
//! so distinct components get independent, reproducible streams. All RNGs in
//! the crate are ChaCha20, which has a stable output sequence across
//! platforms and releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a global seed and a component label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// A seeded RNG for the given component label.
pub fn rng_for(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, label))
}
