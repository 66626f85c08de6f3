//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` seeded
//! from a base seed plus a stream tag, so results do not depend on thread
//! scheduling or on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream.rotate_left(17)) ^ index.rotate_left(41))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(base: u64, stream: u64, index: u64) -> Rng {
    rng_from(derive_seed(base, stream, index))
}

// stream tags
pub const STREAM_NETWORK: u64 = 1;
pub const STREAM_MEMBERSHIP: u64 = 2;
pub const STREAM_COVARIATES: u64 = 3;
pub const STREAM_NOISE: u64 = 4;
pub const STREAM_INIT: u64 = 5;
pub const STREAM_REFINE: u64 = 6;
pub const STREAM_REPLICATION: u64 = 7;
