//! Linear softmax head and negative log-likelihood loss.

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::params::Tensors;
use super::scalar::Scalar;

pub const PROB_FLOOR: f64 = 1e-12;

/// Bias-free linear map onto class logits followed by a numerically
/// stabilized softmax (max subtraction before exponentiation).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<S> {
    pub in_dim: usize,
    pub classes: usize,
    /// [classes][in_dim]
    pub weight: Vec<S>,
}

pub struct SoftmaxCache<S> {
    input: Vec<S>,
    probs: Vec<S>,
}

impl<S: Scalar> SoftmaxHead<S> {
    pub fn new(in_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + classes) as f64).sqrt();
        SoftmaxHead {
            in_dim,
            classes,
            weight: uniform(in_dim * classes, limit, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SoftmaxHead {
            in_dim: self.in_dim,
            classes: self.classes,
            weight: vec![S::ZERO; self.weight.len()],
        }
    }

    pub fn forward(&self, input: Vec<S>) -> (Vec<S>, SoftmaxCache<S>) {
        assert_eq!(input.len(), self.in_dim);
        let mut logits = vec![S::ZERO; self.classes];
        for (cls, logit) in logits.iter_mut().enumerate() {
            let row = &self.weight[cls * self.in_dim..(cls + 1) * self.in_dim];
            let mut acc = S::ZERO;
            for (w, x) in row.iter().zip(input.iter()) {
                acc += *w * *x;
            }
            *logit = acc;
        }
        let max = logits
            .iter()
            .copied()
            .fold(logits[0], |a, b| a.maximum(b));
        let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: S = exps.iter().copied().sum();
        let probs: Vec<S> = exps.iter().map(|&e| e / total).collect();
        let cache = SoftmaxCache {
            input,
            probs: probs.clone(),
        };
        (probs, cache)
    }

    /// Backward for NLL of `label`, scaled by `scale` (use 1/batch for
    /// mean reduction). Returns the input gradient.
    pub fn backward(
        &self,
        cache: &SoftmaxCache<S>,
        label: usize,
        scale: S,
        grads: &mut SoftmaxHead<S>,
    ) -> Vec<S> {
        let mut dx = vec![S::ZERO; self.in_dim];
        for cls in 0..self.classes {
            let mut dlogit = cache.probs[cls];
            if cls == label {
                dlogit -= S::ONE;
            }
            dlogit *= scale;
            if dlogit == S::ZERO {
                continue;
            }
            let row = &self.weight[cls * self.in_dim..(cls + 1) * self.in_dim];
            let grow = &mut grads.weight[cls * self.in_dim..(cls + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dlogit * cache.input[i];
                dx[i] += dlogit * row[i];
            }
        }
        dx
    }
}

impl<S: Scalar> Tensors<S> for SoftmaxHead<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        vec![(
            "weight".into(),
            vec![self.classes, self.in_dim],
            self.weight.as_slice(),
        )]
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        vec![(
            "weight".into(),
            vec![self.classes, self.in_dim],
            self.weight.as_mut_slice(),
        )]
    }
}

/// -ln p[label], with p floored at 1e-12.
pub fn nll<S: Scalar>(probs: &[S], label: usize) -> S {
    let floor = S::from_f64(PROB_FLOOR);
    -(probs[label].maximum(floor)).ln()
}

/// Mean NLL over (probs, label) pairs.
pub fn mean_nll<S: Scalar>(batch: &[(Vec<S>, usize)]) -> S {
    assert!(!batch.is_empty());
    let total: S = batch.iter().map(|(p, y)| nll(p, *y)).sum();
    total / S::from_f64(batch.len() as f64)
}
