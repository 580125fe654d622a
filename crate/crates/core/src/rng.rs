//! The single seeded generator family used across the harness.
//!
//! Every random choice (bootstrap replicates, simulated predictors, review
//! sampling, synthetic corpora) draws from ChaCha8 streams. Streams that must
//! not depend on scheduling order are keyed by a digest of the seed and a
//! caller-supplied label, so the same label always yields the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type HarnessRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> HarnessRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, label parts)`.
pub fn keyed(seed: u64, parts: &[&[u8]]) -> HarnessRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stream `index` of the generator seeded with `seed`.
pub fn indexed(seed: u64, index: u64) -> HarnessRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
