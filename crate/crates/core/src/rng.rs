//! Seeded randomness. Every stochastic operation in the crate draws from a
//! ChaCha stream derived from an explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines two seeds into a well-mixed third, e.g. `(run_seed, step)`.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b.rotate_left(17))
}

/// Seed for a named stream, so unrelated consumers never share draws.
pub fn stream(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(splitmix(seed), |h, b| mix(h, b as u64))
}
