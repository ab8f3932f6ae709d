//! Stochastic gradient descent with classical momentum and a halving
//! learning-rate schedule.

use super::params::Tensors;
use super::scalar::Scalar;

/// v <- momentum * v - lr * g;  p <- p + v
#[derive(Debug, Clone)]
pub struct SgdMomentum<S> {
    pub momentum: S,
    velocities: Vec<Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum: S::from_f64(momentum),
            velocities: Vec::new(),
        }
    }

    pub fn step<M: Tensors<S>>(&mut self, model: &mut M, grads: &M, lr: S) {
        let gs = grads.tensors();
        let mut ps = model.tensors_mut();
        assert_eq!(gs.len(), ps.len());
        if self.velocities.is_empty() {
            self.velocities = gs.iter().map(|(_, _, g)| vec![S::ZERO; g.len()]).collect();
        }
        assert_eq!(self.velocities.len(), ps.len());
        for (ti, (p, g)) in ps.iter_mut().zip(gs.iter()).enumerate() {
            let v = &mut self.velocities[ti];
            assert_eq!(p.2.len(), g.2.len());
            for k in 0..v.len() {
                v[k] = self.momentum * v[k] - lr * g.2[k];
                p.2[k] += v[k];
            }
        }
    }
}

/// Base rate halved once past 50% of the run and again past 75%.
pub fn lr_at(epoch: usize, total_epochs: usize, base: f64) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    if epoch * 4 >= total_epochs * 3 {
        base / 4.0
    } else if epoch * 2 >= total_epochs {
        base / 2.0
    } else {
        base
    }
}
