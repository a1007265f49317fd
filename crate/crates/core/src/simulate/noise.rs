//! Counter-based random draws: every draw is a pure function of
//! `(seed, path, key)`, so paths can be simulated in any order or in parallel
//! and two strategies sharing a seed see the same Brownian motion.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::scalar::Scalar;

/// Increment of a top-level block.
pub(crate) const TAG_TOP: u64 = 1;
/// Midpoint displacement when a block is split.
pub(crate) const TAG_MID: u64 = 2;
/// Uniform for the Brownian-bridge ruin test of a fine step.
pub(crate) const TAG_BRIDGE: u64 = 3;

#[inline]
fn fmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn key(tag: u64, level: u32, index: u64) -> u64 {
    debug_assert!(index < 1 << 48);
    tag << 56 | (level as u64) << 48 | index
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Noise {
    stream: u64,
}

impl Noise {
    pub(crate) fn new(seed: u64, path: u64) -> Self {
        let s = fmix(seed ^ 0x9e37_79b9_7f4a_7c15);
        Self { stream: fmix(s ^ path.wrapping_mul(0xd6e8_feb8_6659_fd93)) }
    }

    #[inline]
    fn rng(&self, key: u64) -> SplitMix64 {
        SplitMix64::seed_from_u64(fmix(self.stream ^ key.wrapping_mul(0xa076_1d64_78bd_642f)))
    }

    #[inline]
    pub(crate) fn normal<T: Scalar>(&self, key: u64) -> T {
        T::sample_normal(&mut self.rng(key))
    }

    #[inline]
    pub(crate) fn unit<T: Scalar>(&self, key: u64) -> T {
        T::sample_unit(&mut self.rng(key))
    }
}
