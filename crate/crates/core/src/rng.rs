//! Seed handling. Every stochastic routine takes an explicit seed and builds
//! its own generator, so results never depend on call order or threading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-index child seed. Independent of platform and of the order in
/// which indices are visited.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5EED)))
}

/// Named sub-streams of one sample seed.
pub mod stream {
    pub const MASK: u64 = 0x3A5;
    pub const SKETCH: u64 = 0x5_3C;
    pub const FORWARD_NOISE: u64 = 0xF0;
    pub const CHAIN: u64 = 0xC4;
    pub const IMAGE_NOISE: u64 = 0x1A;
}
