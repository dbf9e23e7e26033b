//! Counter-based random streams.
//!
//! Every independent consumer (a Gibbs chain, an epoch shuffle, a dropout
//! mask) gets its own ChaCha stream keyed by `(seed, stream id)`, so results
//! do not depend on how work is split across threads, and a stream can be
//! saved and resumed from its word position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use rand::Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer; mixes a seed with a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Resumable position of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, decimal-encoded since it is a u128.
    pub word_pos: String,
}

impl StreamState {
    pub fn capture(seed: u64, rng: &StreamRng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<StreamRng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut r = stream(self.seed, self.stream);
        r.set_word_pos(pos);
        Some(r)
    }
}
