use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Seeded source of initial weights: `U(-1/√fan_in, 1/√fan_in)`.
pub struct WeightInit {
    rng: ChaCha8Rng,
}

impl WeightInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }
}
