//! Reproducible, splittable random streams.
//!
//! Every replica draws from `ChaCha8Rng` seeded with a master seed and
//! positioned on its own stream, so the result of a study never depends on
//! how replicas are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed(u64);

impl StreamSeed {
    pub fn new(master: u64) -> Self {
        StreamSeed(master)
    }

    pub fn master(&self) -> u64 {
        self.0
    }

    /// A child seed for an independent sub-study identified by `tag`.
    pub fn derive(&self, tag: u64) -> StreamSeed {
        StreamSeed(mix64(self.0 ^ mix64(tag)))
    }

    /// Child seed keyed by a string label.
    pub fn derive_str(&self, label: &str) -> StreamSeed {
        let tag = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.derive(tag)
    }

    /// The stream for replica `index`.
    pub fn replica(&self, index: u64) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(index);
        rng
    }
}
