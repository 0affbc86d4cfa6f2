//! Deterministic random-number streams.
//!
//! All randomness in the toolkit flows from a single experiment seed. Each
//! consumer (split shuffling, view transforms, noise injection, ...) derives
//! its own named stream, so adding or removing one consumer never perturbs
//! the draws seen by another. This is what makes an SSL run with both loss
//! weights at zero bit-identical to a supervised run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A named, indexed substream of the master seed.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
