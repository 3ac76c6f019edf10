//! Seed derivation. Every stochastic routine takes an explicit `u64` seed and
//! builds its own ChaCha stream, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed keyed by a label: the first eight bytes of `sha256(seed_le || label)`.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn derive_idx(seed: u64, label: &str, idx: u64) -> u64 {
    derive(derive(seed, label), &idx.to_string())
}
