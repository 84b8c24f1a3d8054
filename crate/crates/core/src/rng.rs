//! Deterministic random streams.
//!
//! Every stochastic quantity draws from its own ChaCha stream, keyed by the
//! run seed and selected by a path of indices (experiment tag, time step,
//! particle index, ...). Results therefore do not depend on how work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used across the crate, so that different consumers of the same
/// seed never share a stream.
pub mod tag {
    pub const SAMPLER: u64 = 1;
    pub const PLANT: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const PARTICLE: u64 = 4;
    pub const DRIVE: u64 = 5;
    pub const SCAN: u64 = 6;
    pub const INIT: u64 = 7;
    pub const LAYOUT: u64 = 8;
    pub const WALKS: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the generator for the stream selected by `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut id = 0x6a09_e667_f3bc_c908u64;
    for &p in path {
        id = splitmix64(id ^ p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Derives a child seed from a seed and a path; used when a whole sub-computation
/// (for example one particle filter run) needs its own seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in path {
        s = splitmix64(s ^ p);
    }
    s
}
