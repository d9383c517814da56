//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`RngStream`]: a `(seed, counter)`
//! pair that maps to a ChaCha8 generator with the seed as key and the counter as
//! stream id. Identical pairs produce identical sequences on every platform.
//! Parallel work derives independent children with [`RngStream::child`], so the
//! result never depends on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn with_counter(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        rng
    }

    /// An independent stream keyed by this stream and `index`.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(splitmix64(self.seed ^ 0x5851_f42d_4c95_7f2d) ^ self.counter),
            counter: index,
        }
    }

    /// The next stream in sequence (same seed, counter + 1).
    pub fn next(&self) -> RngStream {
        RngStream { seed: self.seed, counter: self.counter.wrapping_add(1) }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
