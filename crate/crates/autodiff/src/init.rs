//! Seeded parameter initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

/// Uniform values in [-limit, limit].
pub fn uniform(shape: &[usize], limit: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed together")
}

/// Xavier-uniform for a [fan_in, fan_out] linear map.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], limit, rng)
}

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
