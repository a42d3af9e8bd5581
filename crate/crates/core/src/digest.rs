//! Content hashes and seeded orderings.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// A 64-bit key derived from `seed` and `label`: the first eight bytes
/// (big-endian) of SHA-256 over `"{seed}:{label}"`.
///
/// Seeded partitions sort by this key, which keeps them reproducible from
/// any language with a SHA-256 implementation.
pub fn seeded_key(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{label}").as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

/// Round half up, as used for every split size.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}
