//! Keyed random streams.
//!
//! Each stream is a ChaCha8 generator whose 256-bit key is derived from
//! `(seed, purpose, index, sub-index)`. Streams for different purposes or
//! indices never share state, so draws do not depend on evaluation order
//! or on how work is split across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// What a stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Correlation,
    Volatility,
    Baseline,
    InitialNodes,
    Brownian,
    EvalNodes,
    EvalBrownian,
    NetInit,
    Surrogate,
    Scratch,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Correlation => 0x636f_7272,
            Purpose::Volatility => 0x766f_6c61,
            Purpose::Baseline => 0x6261_7365,
            Purpose::InitialNodes => 0x696e_6974,
            Purpose::Brownian => 0x6272_6f77,
            Purpose::EvalNodes => 0x6576_6e64,
            Purpose::EvalBrownian => 0x6576_6277,
            Purpose::NetInit => 0x6e65_7469,
            Purpose::Surrogate => 0x7375_7272,
            Purpose::Scratch => 0x7363_7274,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream keyed by `(seed, purpose, index, sub)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64, sub: u64) -> Stream {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed ^ splitmix(purpose.tag()));
    h = splitmix(h ^ index);
    h = splitmix(h ^ sub.rotate_left(17));
    for chunk in key.chunks_mut(8) {
        h = splitmix(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    substream(seed, purpose, index, 0)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count).map(|_| standard_normal(rng)).collect()
}

/// Uniform draw on `[lo, hi]`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
