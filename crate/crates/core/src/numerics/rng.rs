//! Seeded randomness.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher PRNG):
//! the 64-bit run seed is expanded with `seed_from_u64`, and independent
//! consumers draw from distinct 64-bit stream ids via `set_stream`, so adding
//! a consumer never perturbs the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const HEAD_REINIT: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream `stream` of the run seed, advanced to word `offset · 2³²` so that
/// per-epoch or per-item consumers get disjoint sub-sequences.
pub fn rng_at(seed: u64, stream: u64, offset: u64) -> SeededRng {
    let mut rng = rng_for(seed, stream);
    rng.set_word_pos((offset as u128) << 32);
    rng
}

/// Uniform on `[-bound, bound]`.
pub fn uniform_symmetric(rng: &mut SeededRng, bound: f64) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    rng.gen_range(-bound..=bound)
}

/// Tensor of the given shape drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform(rng: &mut SeededRng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = uniform_symmetric(rng, bound));
    t
}
