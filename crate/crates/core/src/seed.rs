//! Seed splitting. Every random stream is derived from one global seed as
//! `child = first 8 bytes (LE) of SHA-256(parent LE || label || index LE)`,
//! so any trajectory, epoch or episode can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn child_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, label: &str, index: u64) -> Rng {
    rng(child_seed(parent, label, index))
}
