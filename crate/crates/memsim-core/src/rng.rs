//! Seed derivation for independent random substreams.
//!
//! Every sampled object in the system (a script, a rollout, a rerollout, an
//! epoch) draws from its own ChaCha stream whose seed is a pure function of
//! `(master seed, domain, index)`. Results are therefore identical no matter
//! in which order — or on how many workers — the objects are computed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep substreams for different purposes disjoint.
pub mod domain {
    pub const SCRIPT: u64 = 0x01;
    pub const PARAMS_INIT: u64 = 0x02;
    pub const GLOBAL_ROLLOUT: u64 = 0x03;
    pub const LOCAL_SESSIONS: u64 = 0x04;
    pub const LOCAL_ANCHOR: u64 = 0x05;
    pub const LOCAL_REROLLOUT: u64 = 0x06;
    pub const EPOCH: u64 = 0x07;
}

/// SplitMix64 finalizer; a fixed bijective mixer on `u64`.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a parent seed, a domain tag, and an index.
pub fn mix(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index)
}

/// A fresh ChaCha stream for `(seed, domain, index)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, domain, index))
}
