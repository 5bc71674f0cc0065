//! Counter-based, splittable random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(seed, domain, index)`. Streams are ChaCha8 keystreams, so the draws of one
//! entity never depend on how many draws another entity made, which keeps
//! results identical across thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

/// Subsystem tag mixed into every stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    TaskGeometry = 1,
    TaskSample = 2,
    ModelInit = 3,
    Pretrain = 4,
    DpOptim = 5,
    Tuner = 6,
    Split = 7,
    Shadow = 8,
    ShadowMask = 9,
    FedShard = 10,
    FedCohort = 11,
    FedClient = 12,
    FedNoise = 13,
    Experiment = 14,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> SimRng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ (domain as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    h = splitmix64(h ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        let word = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, for handing a sub-experiment its own key space.
pub fn child_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ (domain as u64) << 48) ^ splitmix64(index))
}

#[inline]
pub fn standard_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}
