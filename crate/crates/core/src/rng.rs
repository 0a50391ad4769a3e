//! Seeded RNG streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from `(seed, stream, index)`, so adding draws in one place never shifts
//! the values seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Backbone conv/BN initialization; index is the block index.
    Backbone,
    /// Classification head initialization.
    Head,
    /// Per-epoch batch order; index is the epoch.
    Shuffle,
    /// Synthetic data generation; index is the split.
    Synth,
    /// Test-only draws.
    Scratch,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Backbone => 0x6261_636b,
            Stream::Head => 0x6865_6164,
            Stream::Shuffle => 0x7368_7566,
            Stream::Synth => 0x7379_6e74,
            Stream::Scratch => 0x7363_7261,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.tag().to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
