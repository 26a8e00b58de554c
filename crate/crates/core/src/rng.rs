//! Counter-based, splittable random streams.
//!
//! A draw is fully determined by `(seed, stream_id, draw index)`. Streams for
//! individual samples, views and ops are derived by mixing keys into the
//! stream id, so the values an item sees never depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Derives an independent stream for a sub-task.
    pub fn child(&self, key: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix(self.stream_id ^ mix(key)),
        }
    }

    /// Stream for a path of keys, e.g. `(purpose, epoch, sample, view)`.
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        keys.iter()
            .fold(RngStream::new(seed, 0), |s, &k| s.child(k))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream_id);
        r
    }
}

/// Stable purpose tags for keyed streams.
pub mod purpose {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const PROBE: u64 = 7;
}
