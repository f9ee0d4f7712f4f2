//! Seeded randomness. Every component draws from its own ChaCha stream so
//! that, for example, adding an adapter never perturbs the head's init.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Backbone = 1,
    Adapter = 2,
    Head = 3,
    Data = 4,
    Train = 5,
    Check = 6,
    Appearance = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Values are drawn in `f32` and widened, so `f32` and `f64` models built
/// from the same seed hold the same numbers.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.random_range(-bound..bound) as f64))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Normal(0, std²) resampled outside ±2·std.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v as f64);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `√(1/fan_in)` bound for a weight that right-multiplies activations of
/// width `fan_in`.
pub fn fan_in_bound(fan_in: usize) -> f32 {
    (1.0 / fan_in as f32).sqrt()
}
