//! Seeding policy.
//!
//! All randomness flows through ChaCha8 generators. Ops that take a raw
//! `rng_seed` use [`seeded`]; pipeline code derives independent named
//! streams from one root seed with [`derived`], where the child seed is
//! `SHA-256(root_le ‖ label ‖ index_le)`. Both derivations are stable
//! across releases: same seed, same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator for an op-level `rng_seed` argument.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 32-byte child seed for a named stream.
pub fn derive_seed(root: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Generator for the `index`-th member of the named stream `label`.
pub fn derived(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, label, index))
}

/// First 8 bytes of the derived seed as a `u64`, for ops that take a raw
/// seed argument.
pub fn derive_u64(root: u64, label: &str, index: u64) -> u64 {
    let bytes = derive_seed(root, label, index);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// Samples an index from a probability row (sums to 1 within tolerance).
/// Cumulative scan; any float dust at the top is assigned to the last
/// positive-probability index so the draw is always valid.
pub fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}
