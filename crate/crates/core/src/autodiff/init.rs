use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Xavier/Glorot uniform: `U(−a, a)`, `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(
    rng: &mut Rng,
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-a..a)))
}

pub fn normal<T: Scalar>(rng: &mut Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}
