//! Weight initialisers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Float, Tensor};

/// Uniform(-b, b) with `b = gain * sqrt(3 / fan_in)`.
pub fn uniform_fan_in<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| F::from_f64_lossy(dist.sample(rng)))
}

/// Gain for leaky-ReLU layers with the given negative slope.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}
