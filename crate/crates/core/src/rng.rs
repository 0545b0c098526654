//! Explicit seed streams. Every random draw in the crate comes from a
//! generator derived from a base seed and a path of stream identifiers, so
//! results never depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const IDENTITY: u64 = 0x1d;
    pub const SCENE: u64 = 0x5c;
    pub const TEST_MASK: u64 = 0x7e;
    pub const INIT: u64 = 0x11;
    pub const ORDER: u64 = 0x0d;
    pub const STEP: u64 = 0x57;
    pub const MASK_PLAN: u64 = 0x3a;
    pub const PROPOSALS: u64 = 0x9f;
    pub const GALLERY: u64 = 0x6a;
    pub const NULL_MODEL: u64 = 0x4e;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}
