//! Seed-stream derivation.
//!
//! Every component that needs randomness (a weight matrix, an adapter, a
//! task generator) draws from its own ChaCha8 stream derived from the run
//! seed and a stable label. Streams are independent of construction order,
//! so adding an adapter never shifts the base model's initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive the deterministic RNG stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed, label))
}

fn fnv1a(seed: u64, label: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in seed.to_le_bytes().into_iter().chain(label.bytes()) {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
