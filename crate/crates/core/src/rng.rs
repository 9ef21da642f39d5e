//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from an
//! explicit `(seed, stream)` pair, so runs are reproducible bit for bit and
//! independent consumers never share a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for a named stream under a master seed.
pub fn stream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

/// Child seed for a named sub-task, for APIs that take a seed rather than a generator.
pub fn derive(seed: u64, name: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ fnv1a(name.as_bytes()))
}

/// Generator for the `index`-th member of a named stream family.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    let base = splitmix64(seed ^ fnv1a(name.as_bytes()));
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "world").random();
        let b: u64 = stream(7, "world").random();
        let c: u64 = stream(7, "noise").random();
        let d: u64 = indexed_stream(7, "world", 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
