//! Seed derivation. Every random draw in the pipeline comes from a ChaCha8
//! stream whose seed is a pure function of (base seed, purpose, index), so
//! any step can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for the `index`-th draw of the stream named `purpose`.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    splitmix(splitmix(base ^ fnv1a(purpose)).wrapping_add(index))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    seeded(derive_seed(base, purpose, index))
}
