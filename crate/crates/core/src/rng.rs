//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by `(seed, purpose)`, so runs are reproducible per purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes are arbitrary distinct tags.
pub mod purpose {
    pub const GENERATE: u64 = 0x47454e;
    pub const SPLIT: u64 = 0x53504c;
    pub const INIT: u64 = 0x494e4954;
    pub const SHUFFLE: u64 = 0x534855;
    pub const BUFFER: u64 = 0x425546;
    pub const SUBSPACE: u64 = 0x535542;
    pub const PROBE: u64 = 0x50524f;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, purpose: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose)))
}

/// Like [`rng_for`] with an extra index, e.g. the time step.
pub fn rng_for_step(seed: u64, purpose: u64, step: u64) -> StreamRng {
    rng_for(splitmix64(seed).wrapping_add(step), purpose)
}
