use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Seeded parameter initializer.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Values uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(data, shape).expect("shape matches generated buffer")
    }

    /// Kaiming-normal (ReLU gain) trainable tensor for a layer with `fan_in` inputs.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(shape, std).param()
    }

    /// Unit-gain normal trainable tensor for a linear (no activation) layer.
    pub fn lecun(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        self.normal(shape, std).param()
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(data, shape).expect("shape matches generated buffer")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
