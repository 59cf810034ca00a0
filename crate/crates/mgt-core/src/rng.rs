//! Seeded random streams.
//!
//! All randomness in a run flows from a single `u64` seed. Each component
//! draws from its own named stream so that, for example, changing the number
//! of pretraining epochs does not perturb the data splits.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to derive stream ids from stream names.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG for the named sub-stream of `seed`.
///
/// Streams with different names are statistically independent; the same
/// (seed, name) pair always yields the same generator.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
