//! Seed streams.
//!
//! Every stochastic routine takes a [`SeedStream`], a 64-bit key that can be
//! split into independent child streams by label. A stream turns into a
//! concrete generator with [`SeedStream::rng`], which keys a ChaCha8 block
//! cipher (a counter-based generator). Child keys depend only on the parent
//! key and the label, so shard `i` of a parallel job draws exactly the same
//! numbers as shard `i` of a serial job.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Concrete generator type handed out by [`SeedStream::rng`].
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A splittable seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream for `label`. Distinct labels give statistically
    /// independent streams; the same label always gives the same stream.
    pub fn fork(&self, label: u64) -> Self {
        Self { key: splitmix64(self.key ^ splitmix64(label.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)) }
    }

    /// Child stream for a string label (FNV-1a hashed).
    pub fn fork_str(&self, label: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.fork(h)
    }

    pub fn rng(&self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut z = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
