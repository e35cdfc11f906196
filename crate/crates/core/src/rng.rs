//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream addressed by
//! `(seed, stream)`. Deployments get their own stream keyed by id, so the
//! behaviour of deployment `k` in replication `r` does not depend on what
//! the policy did with deployments `0..k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream ids below this value are reserved for per-deployment streams.
pub const DEPLOYMENT_STREAMS: u64 = 1 << 48;

/// Stream used for the arrival process of a replication.
pub const ARRIVAL_STREAM: u64 = DEPLOYMENT_STREAMS;

pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finaliser, used to derive replication seeds from a base seed.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
