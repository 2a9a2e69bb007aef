use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

/// Kaiming-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(values, shape)
}
