//! Weight initializers. All draws go through a caller-supplied ChaCha
//! stream so model construction is reproducible from a single seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;

/// Uniform in [-limit, limit].
pub fn uniform<S: Scalar>(n: usize, limit: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-limit..=limit)))
        .collect()
}

/// He-style uniform for rectified layers: limit = sqrt(6 / fan_in).
pub fn he_uniform<S: Scalar>(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    uniform(n, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Recurrent-layer initialization, uniform in [-0.1, 0.1].
pub fn lstm_uniform<S: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    uniform(n, 0.1, rng)
}
