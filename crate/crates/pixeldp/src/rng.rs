//! Seedable, splittable random streams.
//!
//! All randomness in the crate flows through [`NoiseStream`], a thin wrapper
//! around ChaCha8. A stream is identified by a 64-bit seed; independent
//! substreams are derived from `(seed, index)` using ChaCha's stream counter,
//! so draw `i` produces the same bytes whether draws run serially or in
//! parallel, and regardless of batch partitioning.
//!
//! Labels passed to [`NoiseStream::fork`] derive child seeds with a
//! SplitMix64 finalizer, which keeps unrelated consumers (noise draws, data
//! shuffling, attack restarts) on non-overlapping streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible family of random substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// RNG for substream `index`. Same `(seed, index)` always yields the
    /// same byte stream.
    pub fn substream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Derive an independent child family, e.g. one per pipeline stage.
    pub fn fork(&self, label: u64) -> NoiseStream {
        NoiseStream {
            seed: splitmix64(self.seed ^ splitmix64(label)),
        }
    }
}
