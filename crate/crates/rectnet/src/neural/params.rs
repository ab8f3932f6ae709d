//! Uniform access to the named parameter tensors of layers and models.
//!
//! Gradient buffers reuse the owning type (a zeroed clone of the layer),
//! so a model and its gradients expose tensors in the same canonical
//! order; the optimizer, checkpointing, and gradient checking all rely
//! on that ordering.

use super::scalar::Scalar;

pub trait Tensors<S> {
    /// Named tensors with shapes, in canonical order.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])>;
    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])>;
}

pub fn param_count<S, M: Tensors<S>>(m: &M) -> usize {
    m.tensors().iter().map(|(_, _, d)| d.len()).sum()
}

/// into += from, tensor by tensor.
pub fn accumulate<S: Scalar, M: Tensors<S>>(into: &mut M, from: &M) {
    let src = from.tensors();
    let mut dst = into.tensors_mut();
    assert_eq!(src.len(), dst.len());
    for ((_, _, d), (_, _, s)) in dst.iter_mut().zip(src.iter()) {
        assert_eq!(d.len(), s.len());
        for (a, b) in d.iter_mut().zip(s.iter()) {
            *a += *b;
        }
    }
}

pub fn scale_params<S: Scalar, M: Tensors<S>>(m: &mut M, factor: S) {
    for (_, _, d) in m.tensors_mut() {
        for v in d {
            *v *= factor;
        }
    }
}

/// Flatten all tensors into one vector, canonical order.
pub fn flatten<S: Scalar, M: Tensors<S>>(m: &M) -> Vec<S> {
    let mut out = Vec::new();
    for (_, _, d) in m.tensors() {
        out.extend_from_slice(d);
    }
    out
}

/// Overwrite all tensors from a flat vector; returns the number of
/// scalars consumed.
pub fn unflatten<S: Scalar, M: Tensors<S>>(m: &mut M, flat: &[S]) -> usize {
    let mut offset = 0;
    for (_, _, d) in m.tensors_mut() {
        d.copy_from_slice(&flat[offset..offset + d.len()]);
        offset += d.len();
    }
    offset
}
