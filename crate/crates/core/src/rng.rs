//! Deterministic RNG stream derivation.
//!
//! Every random draw in the simulator comes from a ChaCha8 stream whose seed
//! is derived from the experiment master seed plus a stream tag and up to two
//! integer coordinates (round, client id). Streams are therefore independent
//! of execution order and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; a full-period mixer over u64.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from (master, tag, a, b).
pub fn derive_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut s = splitmix(master ^ fnv1a(tag));
    s = splitmix(s ^ a);
    splitmix(s ^ b)
}

/// A seeded ChaCha8 stream for the given coordinates.
pub fn stream(master: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, a, b))
}
