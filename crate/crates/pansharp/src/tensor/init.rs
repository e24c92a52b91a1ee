//! Deterministic parameter initialization.
//!
//! Sampling uses xoshiro256** seeded through `seed_from_u64` (SplitMix64
//! expansion), so the same seed yields bit-identical tensors on every
//! platform.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum InitScheme {
    /// Uniform in [-b, b] with b = sqrt(6 / fan_in); fan_in is taken from
    /// the trailing three dims (in_c * kh * kw for conv weights).
    HeUniform,
    Zeros,
}

pub fn seeded_init(shape: Shape, seed: u64, scheme: InitScheme) -> Result<Tensor> {
    match scheme {
        InitScheme::Zeros => Tensor::constant(shape, 0.0),
        InitScheme::HeUniform => {
            let fan_in = shape.c * shape.h * shape.w;
            if fan_in == 0 {
                return Err(Error::InvalidArgument(format!(
                    "zero fan-in for shape {shape}"
                )));
            }
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let dist = Uniform::new_inclusive(-bound, bound);
            let values = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_vec(shape, values)
        }
    }
}
