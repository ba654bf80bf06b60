//! Seed derivation for named, independent random streams.
//!
//! One master seed spawns every stream used by an experiment (weight init,
//! data order, operator choice, intervention noise, reparameterization
//! noise). Streams are derived by mixing the master seed with fixed tags
//! and counters, so consuming one stream never perturbs another and any
//! draw can be reproduced from `(master, tag, counters)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. The numeric values are part of the reproducibility
/// contract: changing them changes every derived stream.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x01;
    pub const DATA_ORDER: u64 = 0x02;
    pub const OPERATOR_CHOICE: u64 = 0x03;
    pub const INTERVENTION: u64 = 0x04;
    pub const REPARAM: u64 = 0x05;
    pub const REPARAM_EVAL: u64 = 0x06;
    pub const APPLY: u64 = 0x07;
    pub const RUN: u64 = 0x08;
    pub const DATASET: u64 = 0x09;
    pub const PROBE: u64 = 0x0a;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a master seed with a tag and counters into a derived seed.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// A ChaCha stream for `(master, parts...)`.
pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible() {
        let mut a = stream(7, &[tag::DATA_ORDER, 3]);
        let mut b = stream(7, &[tag::DATA_ORDER, 3]);
        for _ in 0..32 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn tags_and_counters_separate_streams() {
        assert_ne!(
            derive(7, &[tag::DATA_ORDER, 0]),
            derive(7, &[tag::DATA_ORDER, 1])
        );
        assert_ne!(
            derive(7, &[tag::DATA_ORDER, 0]),
            derive(7, &[tag::REPARAM, 0])
        );
        assert_ne!(derive(7, &[tag::RUN]), derive(8, &[tag::RUN]));
    }
}
