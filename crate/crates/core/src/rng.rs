//! Seed derivation. Every random stream in a run is a named child of the
//! master seed, so no two consumers share a generator and nothing reads
//! ambient entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (first 8 bytes of its SHA-256).
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Child seed of `parent` for the stream called `tag`, further indexed by `path`.
pub fn derive(parent: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(parent ^ hash_str(tag));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, tag: &str, path: &[u64]) -> Rng {
    rng(derive(parent, tag, path))
}
