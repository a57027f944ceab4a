//! Reproducible random streams.
//!
//! Every draw comes from ChaCha20 keyed by the user seed, with the 64-bit
//! stream id `(purpose << 32) | index`. Layers, perturbations and data draws
//! therefore use independent streams whose output does not depend on the
//! order in which other streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Topology = 1,
    Perturbation = 2,
    SystemicDraw = 3,
    CategoryDraw = 4,
    Folds = 5,
    Resampling = 6,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | (index & 0xffff_ffff));
    rng
}
