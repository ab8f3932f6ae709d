//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::Tensors;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor name, flat index, numeric, analytic) of the worst case.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// Compare analytic gradients against central differences of `loss_fn`
/// on up to `samples` parameters drawn uniformly across all tensors.
/// `analytic` holds the gradients in a zeroed clone of the model, so
/// tensor order matches by construction. f64 models only: the probe
/// step is 1e-5.
pub fn check_model<M, F>(
    model: &mut M,
    analytic: &M,
    mut loss_fn: F,
    samples: usize,
    seed: u64,
) -> GradCheckReport
where
    M: Tensors<f64>,
    F: FnMut(&M) -> f64,
{
    let eps = 1e-5;
    let total: usize = model.tensors().iter().map(|(_, _, d)| d.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..samples.min(total))
        .map(|_| rng.gen_range(0..total))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    for flat in picks {
        // Locate the tensor holding this flat index.
        let (tensor_idx, inner, name) = {
            let tensors = model.tensors();
            let mut offset = 0;
            let mut found = None;
            for (ti, (name, _, d)) in tensors.iter().enumerate() {
                if flat < offset + d.len() {
                    found = Some((ti, flat - offset, name.clone()));
                    break;
                }
                offset += d.len();
            }
            found.expect("flat index within total")
        };

        let orig = model.tensors()[tensor_idx].2[inner];
        set_param(model, tensor_idx, inner, orig + eps);
        let lp = loss_fn(model);
        set_param(model, tensor_idx, inner, orig - eps);
        let lm = loss_fn(model);
        set_param(model, tensor_idx, inner, orig);

        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic.tensors()[tensor_idx].2[inner];
        let rel = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-6);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name, inner, numeric, a));
        }
    }
    report
}

fn set_param<M: Tensors<f64>>(model: &mut M, tensor_idx: usize, inner: usize, value: f64) {
    model.tensors_mut()[tensor_idx].2[inner] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::Dense;

    #[test]
    fn detects_correct_and_broken_gradients() {
        let mut model = Dense {
            in_dim: 3,
            out_dim: 1,
            relu: false,
            weight: vec![0.3f64, -0.2, 0.5],
            bias: vec![0.1],
        };
        let x = [1.0, 2.0, -1.0];
        // loss = y^2 with y = w.x + b; dL/dw = 2y * x, dL/db = 2y.
        let y: f64 = model.weight.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>()
            + model.bias[0];
        let correct = Dense {
            weight: x.iter().map(|v| 2.0 * y * v).collect(),
            bias: vec![2.0 * y],
            ..model.clone()
        };
        let loss = |m: &Dense<f64>| {
            let v: f64 =
                m.weight.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + m.bias[0];
            v * v
        };
        let report = check_model(&mut model, &correct, loss, 16, 0);
        assert!(report.passes(1e-4), "max rel {}", report.max_rel_err);

        let mut broken = correct.clone();
        broken.weight[0] += 0.5;
        let report = check_model(&mut model, &broken, loss, 16, 0);
        assert!(!report.passes(1e-4));
    }
}
