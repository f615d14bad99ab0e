//! Seeded randomness: one root seed fans out into named substreams so data
//! generation, weight init, and prompt sampling can be re-seeded independently.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash; also used for cache keys and checkpoint digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic rng for the named substream of a root seed.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(8 + name.len());
    bytes.extend_from_slice(&root_seed.to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

/// Standard normal sample via Box-Muller (avoids a distribution dependency
/// and stays identical across rand versions).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
