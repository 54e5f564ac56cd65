//! Seeding and hashing helpers shared across the crate.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic stream-cipher RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a master seed and a label.
///
/// Used wherever work fans out (per-sample, per-record) so that results do
/// not depend on scheduling or iteration order.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derives a sub-seed from a master seed, a fan-out label, and an index.
pub fn derive_seed_idx(master: u64, label: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(idx.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// SHA-256 of arbitrary bytes as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Short (12 hex char) content hash used to tag configs and reports.
pub fn short_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..12].to_string()
}

/// Maps a string id to a uniform value in [0,1) given a seed.
///
/// Stable across platforms and ingestion order; the basis of dataset
/// split assignment.
pub fn unit_hash(seed: u64, id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let v = u64::from_le_bytes(digest[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}
