//! Seeding conventions.
//!
//! All randomness comes from xoshiro256** generators
//! ([`rand_xoshiro::Xoshiro256StarStar`]) seeded through
//! `seed_from_u64`, which expands the 64-bit seed with SplitMix64.
//! Child seeds are derived with [`derive_seed`], the `n`-th output of a
//! SplitMix64 stream started at the parent seed.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output number `stream` (0-based) for state `parent`:
/// `mix(parent + (stream + 1) * 0x9E3779B97F4A7C15)`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived along a path of stream indices.
pub fn derive_path(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(parent, |s, &p| derive_seed(s, p))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
