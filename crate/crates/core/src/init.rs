//! Parameter initialisers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform_scaled(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

pub fn uniform_scaled(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Identity plus `N(0, std²)` noise, for square projections that start near a pass-through.
pub fn near_identity(n: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = normal(&[n, n], std, rng);
    for i in 0..n {
        t.data_mut()[i * n + i] += 1.0;
    }
    t
}
