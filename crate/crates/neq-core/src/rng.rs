//! Seeded random streams.
//!
//! Each consumer of randomness gets its own ChaCha stream derived from the
//! master seed and a purpose tag, so that e.g. the freezing policy cannot
//! perturb batch shuffling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Per-epoch batch shuffling.
    Shuffle,
    /// Stochastic freezing draws.
    Mask,
    /// Synthetic dataset generation.
    Data,
    /// Dataset splitting.
    Split,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Mask => 3,
            Stream::Data => 4,
            Stream::Split => 5,
        }
    }
}

/// Deterministic sub-stream for (seed, purpose, index). `index` is typically
/// an epoch number.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    // splitmix64-style mixing of the three words into one 64-bit seed.
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream.tag()))
        .wrapping_add(0x517c_c1b7_2722_0a95u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
