//! Seed derivation.
//!
//! Every random stream in a run is derived from the single global seed by
//! hashing it together with a purpose tag and a list of indices. Streams are
//! therefore independent of evaluation order and of the number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// `SHA-256(seed || tag || indices...)`, truncated to 64 bits.
pub fn sub_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, tag, indices))
}

/// Stable 64-bit digest of arbitrary text, used for config and spec hashes.
pub fn text_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
