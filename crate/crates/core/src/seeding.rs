//! Stable seed derivation.
//!
//! Every random stream in the library is a ChaCha8 generator keyed by a seed
//! derived here. The scheme is a counter-based hash: SplitMix64 applied to the
//! running state XOR the next component. It is plain arithmetic on `u64`, so
//! derived seeds are identical across platforms and library versions, unlike
//! `std::collections::hash_map::DefaultHasher` whose algorithm is unspecified.
//!
//! Strings (problem and acquisition names in experiment configs) enter the
//! mix through FNV-1a.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function (Steele, Lea, Flood 2014).
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of components into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state = 0x633d_5c4a_6f1e_83b7u64;
    for &p in parts {
        state = splitmix64(state ^ p);
    }
    state
}

/// FNV-1a over the UTF-8 bytes of `s`.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed for stream `tag` at position `index`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    mix(&[seed, tag, index])
}

/// Deterministic generator for a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags. Values are arbitrary but frozen: changing them changes every
/// derived seed and therefore every recorded run.
pub mod tags {
    pub const REPLICATION: u64 = 0x01;
    pub const DESIGN: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const FIT: u64 = 0x04;
    pub const INNER_START: u64 = 0x05;
    pub const SGA_CHAIN: u64 = 0x06;
    pub const SGA_STEP: u64 = 0x07;
    pub const RESCORE: u64 = 0x08;
    pub const ACQUISITION: u64 = 0x09;
    pub const DISCRETIZATION: u64 = 0x0a;
    pub const RUN: u64 = 0x0b;
    pub const FIXTURE: u64 = 0x0c;
}
