//! Convolution, max pooling, and dense layers with analytic gradients.

use rand_chacha::ChaCha8Rng;

use super::init::he_uniform;
use super::params::Tensors;
use super::scalar::Scalar;
use super::tensor::Image;

/// Valid cross-correlation (no kernel flip) with optional fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub relu: bool,
    /// [out_ch][in_ch][ky][kx]
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

pub struct ConvCache<S> {
    input: Image<S>,
    /// Post-activation gate: true where the output passed ReLU (always
    /// true when the layer is linear).
    active: Vec<bool>,
    out_h: usize,
    out_w: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            relu,
            weight: he_uniform(out_ch * fan_in, fan_in, rng),
            bias: vec![S::ZERO; out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: vec![S::ZERO; self.weight.len()],
            bias: vec![S::ZERO; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        n + 1 - self.kernel
    }

    #[inline]
    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> S {
        self.weight[((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, input: Image<S>) -> (Image<S>, ConvCache<S>) {
        assert_eq!(input.channels, self.in_ch);
        let out_h = self.out_size(input.height);
        let out_w = self.out_size(input.width);
        let mut out = Image::zeros(self.out_ch, out_h, out_w);
        let mut active = vec![true; out.len()];
        for oc in 0..self.out_ch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                acc += self.w(oc, ic, ky, kx) * input.get(ic, oy + ky, ox + kx);
                            }
                        }
                    }
                    let idx = out.index(oc, oy, ox);
                    if self.relu && acc < S::ZERO {
                        active[idx] = false;
                        out.data[idx] = S::ZERO;
                    } else {
                        out.data[idx] = acc;
                    }
                }
            }
        }
        (
            out,
            ConvCache {
                input,
                active,
                out_h,
                out_w,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &ConvCache<S>, dy: &Image<S>, grads: &mut Conv2d<S>) -> Image<S> {
        let x = &cache.input;
        let mut dx = Image::zeros(x.channels, x.height, x.width);
        for oc in 0..self.out_ch {
            for oy in 0..cache.out_h {
                for ox in 0..cache.out_w {
                    let idx = dy.index(oc, oy, ox);
                    if !cache.active[idx] {
                        continue;
                    }
                    let g = dy.data[idx];
                    if g == S::ZERO {
                        continue;
                    }
                    grads.bias[oc] += g;
                    for ic in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let wi = ((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel
                                    + kx;
                                let xi = x.index(ic, oy + ky, ox + kx);
                                grads.weight[wi] += g * x.data[xi];
                                dx.data[xi] += g * self.weight[wi];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<S: Scalar> Tensors<S> for Conv2d<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        vec![
            (
                "weight".into(),
                vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                self.weight.as_slice(),
            ),
            ("bias".into(), vec![self.out_ch], self.bias.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        vec![
            (
                "weight".into(),
                vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                self.weight.as_mut_slice(),
            ),
            ("bias".into(), vec![self.out_ch], self.bias.as_mut_slice()),
        ]
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2;

pub struct PoolCache {
    argmax: Vec<usize>,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
}

impl MaxPool2 {
    pub fn out_size(n: usize) -> usize {
        n / 2
    }

    pub fn forward<S: Scalar>(&self, input: &Image<S>) -> (Image<S>, PoolCache) {
        let out_h = Self::out_size(input.height);
        let out_w = Self::out_size(input.width);
        let mut out = Image::zeros(input.channels, out_h, out_w);
        let mut argmax = vec![0usize; out.len()];
        for c in 0..input.channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best_idx = input.index(c, oy * 2, ox * 2);
                    let mut best = input.data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = input.index(c, oy * 2 + dy, ox * 2 + dx);
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                    let oi = out.index(c, oy, ox);
                    out.data[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        (
            out,
            PoolCache {
                argmax,
                in_channels: input.channels,
                in_h: input.height,
                in_w: input.width,
            },
        )
    }

    pub fn backward<S: Scalar>(&self, cache: &PoolCache, dy: &Image<S>) -> Image<S> {
        let mut dx = Image::zeros(cache.in_channels, cache.in_h, cache.in_w);
        for (oi, &ii) in cache.argmax.iter().enumerate() {
            dx.data[ii] += dy.data[oi];
        }
        dx
    }
}

/// Fully connected layer with optional fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
    /// [out_dim][in_dim]
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

pub struct DenseCache<S> {
    input: Vec<S>,
    active: Vec<bool>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(in_dim: usize, out_dim: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_dim,
            out_dim,
            relu,
            weight: he_uniform(out_dim * in_dim, in_dim, rng),
            bias: vec![S::ZERO; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            weight: vec![S::ZERO; self.weight.len()],
            bias: vec![S::ZERO; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn forward(&self, input: Vec<S>) -> (Vec<S>, DenseCache<S>) {
        assert_eq!(input.len(), self.in_dim);
        let mut out = vec![S::ZERO; self.out_dim];
        let mut active = vec![true; self.out_dim];
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input.iter()) {
                acc += *w * *x;
            }
            if self.relu && acc < S::ZERO {
                active[o] = false;
            } else {
                out[o] = acc;
            }
        }
        (out, DenseCache { input, active })
    }

    pub fn backward(&self, cache: &DenseCache<S>, dy: &[S], grads: &mut Dense<S>) -> Vec<S> {
        let mut dx = vec![S::ZERO; self.in_dim];
        for o in 0..self.out_dim {
            if !cache.active[o] || dy[o] == S::ZERO {
                continue;
            }
            let g = dy[o];
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * cache.input[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl<S: Scalar> Tensors<S> for Dense<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        vec![
            (
                "weight".into(),
                vec![self.out_dim, self.in_dim],
                self.weight.as_slice(),
            ),
            ("bias".into(), vec![self.out_dim], self.bias.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        vec![
            (
                "weight".into(),
                vec![self.out_dim, self.in_dim],
                self.weight.as_mut_slice(),
            ),
            ("bias".into(), vec![self.out_dim], self.bias.as_mut_slice()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(ch: usize, h: usize, w: usize, data: &[f64]) -> Image<f64> {
        Image::from_data(ch, h, w, data.to_vec())
    }

    #[test]
    fn conv_hand_computed_single_window() {
        let mut layer = Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            relu: false,
            weight: vec![1.0, 10.0, 100.0, 1000.0],
            bias: vec![0.5],
        };
        let x = image(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = layer.forward(x.clone());
        // 1*1 + 2*10 + 3*100 + 4*1000 + 0.5
        assert_eq!(y.data, vec![4321.5]);

        layer.bias[0] = -5000.0;
        layer.relu = true;
        let (y, _) = layer.forward(x);
        assert_eq!(y.data, vec![0.0]);
    }

    #[test]
    fn conv_output_dims_are_valid_correlation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer: Conv2d<f64> = Conv2d::new(1, 16, 5, true, &mut rng);
        assert_eq!(layer.out_size(50), 46);
        assert_eq!(layer.out_size(46), 42);
    }

    #[test]
    fn conv_is_cross_correlation_not_convolution() {
        // Asymmetric kernel distinguishes the two: with cross-correlation
        // the kernel is applied unflipped.
        let layer = Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            relu: false,
            weight: vec![1.0, 0.0, 0.0, 0.0],
            bias: vec![0.0],
        };
        let x = image(1, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (y, _) = layer.forward(x);
        // Output (oy, ox) = x[oy + 0][ox + 0), no flip.
        assert_eq!(y.data, vec![1.0, 2.0]);
    }

    #[test]
    fn pool_takes_max_and_floors_odd_dims() {
        let x = image(
            1,
            3,
            5,
            &[
                1.0, 2.0, 9.0, 1.0, 7.0, //
                4.0, 3.0, 1.0, 8.0, 7.0, //
                5.0, 5.0, 5.0, 5.0, 5.0, // dropped row
            ],
        );
        let (y, _) = MaxPool2.forward(&x);
        assert_eq!(y.height, 1);
        assert_eq!(y.width, 2);
        assert_eq!(y.data, vec![4.0, 9.0]);
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = image(1, 2, 2, &[1.0, 2.0, 4.0, 3.0]);
        let (_, cache) = MaxPool2.forward(&x);
        let dy = image(1, 1, 1, &[5.0]);
        let dx = MaxPool2.backward::<f64>(&cache, &dy);
        assert_eq!(dx.data, vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn dense_hand_computed() {
        let layer = Dense {
            in_dim: 2,
            out_dim: 2,
            relu: false,
            weight: vec![1.0, 2.0, -3.0, 0.5],
            bias: vec![0.1, -0.2],
        };
        let (y, _) = layer.forward(vec![10.0, 20.0]);
        assert_eq!(y, vec![10.0 + 40.0 + 0.1, -30.0 + 10.0 - 0.2]);
    }

    #[test]
    fn dense_relu_blocks_gradient() {
        let layer = Dense {
            in_dim: 1,
            out_dim: 2,
            relu: true,
            weight: vec![1.0, -1.0],
            bias: vec![0.0, 0.0],
        };
        let (y, cache) = layer.forward(vec![2.0]);
        assert_eq!(y, vec![2.0, 0.0]);
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &[1.0, 1.0], &mut grads);
        // Only the active unit contributes.
        assert_eq!(dx, vec![1.0]);
        assert_eq!(grads.weight, vec![2.0, 0.0]);
        assert_eq!(grads.bias, vec![1.0, 0.0]);
    }

    use rand::SeedableRng;

    /// Central-difference check for a scalar loss of one layer's output.
    fn conv_numeric_check(relu: bool) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let layer: Conv2d<f64> = Conv2d::new(2, 3, 2, relu, &mut rng);
        let x_data: Vec<f64> = (0..2 * 4 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let x = Image::from_data(2, 4, 4, x_data);

        // Loss: sum of squares of outputs.
        let loss = |l: &Conv2d<f64>| -> f64 {
            let (y, _) = l.forward(x.clone());
            y.data.iter().map(|v| v * v).sum::<f64>()
        };

        let (y, cache) = layer.forward(x.clone());
        let dy = Image::from_data(3, 3, 3, y.data.iter().map(|v| 2.0 * v).collect());
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &dy, &mut grads);

        let eps = 1e-5;
        let mut probe = layer.clone();
        for wi in (0..probe.weight.len()).step_by(3) {
            let orig = probe.weight[wi];
            probe.weight[wi] = orig + eps;
            let lp = loss(&probe);
            probe.weight[wi] = orig - eps;
            let lm = loss(&probe);
            probe.weight[wi] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.weight[wi];
            assert!(
                (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6) < 1e-4,
                "weight {wi}: numeric {numeric} analytic {analytic}"
            );
        }

        // Input gradient via perturbing x.
        let mut x2 = x.clone();
        for xi in (0..x2.data.len()).step_by(5) {
            let orig = x2.data[xi];
            x2.data[xi] = orig + eps;
            let (yp, _) = layer.forward(x2.clone());
            let lp: f64 = yp.data.iter().map(|v| v * v).sum();
            x2.data[xi] = orig - eps;
            let (ym, _) = layer.forward(x2.clone());
            let lm: f64 = ym.data.iter().map(|v| v * v).sum();
            x2.data[xi] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = dx.data[xi];
            assert!(
                (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6) < 1e-4,
                "input {xi}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        conv_numeric_check(false);
        conv_numeric_check(true);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let layer: Dense<f64> = Dense::new(6, 4, true, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) / 3.0).collect();

        let loss = |l: &Dense<f64>, x: &[f64]| -> f64 {
            let (y, _) = l.forward(x.to_vec());
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let (y, cache) = layer.forward(x.clone());
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &dy, &mut grads);

        let eps = 1e-5;
        let mut probe = layer.clone();
        for wi in 0..probe.weight.len() {
            let orig = probe.weight[wi];
            probe.weight[wi] = orig + eps;
            let lp = loss(&probe, &x);
            probe.weight[wi] = orig - eps;
            let lm = loss(&probe, &x);
            probe.weight[wi] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert!(
                (numeric - grads.weight[wi]).abs()
                    / (numeric.abs() + grads.weight[wi].abs()).max(1e-6)
                    < 1e-4
            );
        }
        let mut x2 = x.clone();
        for xi in 0..x2.len() {
            let orig = x2[xi];
            x2[xi] = orig + eps;
            let lp = loss(&layer, &x2);
            x2[xi] = orig - eps;
            let lm = loss(&layer, &x2);
            x2[xi] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            assert!(
                (numeric - dx[xi]).abs() / (numeric.abs() + dx[xi].abs()).max(1e-6) < 1e-4
            );
        }
    }
}
