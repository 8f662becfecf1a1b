//! Seeded, counter-derived random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by
//! `(master seed, counter, lane)`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, counter: u64, lane: u64) -> Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ counter) ^ lane);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, 3, 1).random();
        let b: u64 = stream(7, 3, 1).random();
        let c: u64 = stream(7, 3, 2).random();
        let d: u64 = stream(7, 4, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
