//! Seed tree: every stage derives its own generator from the run seed and a
//! namespace string, so stages can be rerun independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `seed` and a namespace path such as `"pretrain/shuffle"`.
pub fn derive_seed(seed: u64, namespace: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(namespace.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stage_rng(seed: u64, namespace: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, namespace))
}
