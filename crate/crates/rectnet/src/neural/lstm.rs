//! Single-layer LSTM with gate order (input, forget, cell, output) and
//! full backpropagation through time.
//!
//! Gates use one bias vector each:
//!   i = sigmoid(W_ii x + W_hi h' + b_i)
//!   f = sigmoid(W_if x + W_hf h' + b_f)
//!   g = tanh   (W_ig x + W_hg h' + b_g)
//!   o = sigmoid(W_io x + W_ho h' + b_o)
//!   c = f * c' + i * g
//!   h = o * tanh(c)

use rand_chacha::ChaCha8Rng;

use super::init::lstm_uniform;
use super::params::Tensors;
use super::scalar::Scalar;

pub const GATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<S> {
    pub input_dim: usize,
    pub hidden: usize,
    /// [gate][hidden][input_dim], gate order i, f, g, o.
    pub w_ih: Vec<S>,
    /// [gate][hidden][hidden]
    pub w_hh: Vec<S>,
    /// [gate][hidden]
    pub bias: Vec<S>,
}

pub struct LstmStepCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    i: Vec<S>,
    f: Vec<S>,
    g: Vec<S>,
    o: Vec<S>,
    tanh_c: Vec<S>,
}

impl<S: Scalar> Lstm<S> {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Lstm {
            input_dim,
            hidden,
            w_ih: lstm_uniform(GATES * hidden * input_dim, rng),
            w_hh: lstm_uniform(GATES * hidden * hidden, rng),
            bias: lstm_uniform(GATES * hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Lstm {
            input_dim: self.input_dim,
            hidden: self.hidden,
            w_ih: vec![S::ZERO; self.w_ih.len()],
            w_hh: vec![S::ZERO; self.w_hh.len()],
            bias: vec![S::ZERO; self.bias.len()],
        }
    }

    /// Pre-activations for all four gates at one step.
    fn gate_preacts(&self, x: &[S], h_prev: &[S]) -> Vec<S> {
        let b = self.hidden;
        let mut pre = self.bias.clone();
        for gate in 0..GATES {
            for u in 0..b {
                let mut acc = S::ZERO;
                let wx = &self.w_ih
                    [(gate * b + u) * self.input_dim..(gate * b + u + 1) * self.input_dim];
                for (w, v) in wx.iter().zip(x.iter()) {
                    acc += *w * *v;
                }
                let wh = &self.w_hh[(gate * b + u) * b..(gate * b + u + 1) * b];
                for (w, v) in wh.iter().zip(h_prev.iter()) {
                    acc += *w * *v;
                }
                pre[gate * b + u] += acc;
            }
        }
        pre
    }

    pub fn forward_step(
        &self,
        x: Vec<S>,
        h_prev: Vec<S>,
        c_prev: Vec<S>,
    ) -> (Vec<S>, Vec<S>, LstmStepCache<S>) {
        assert_eq!(x.len(), self.input_dim);
        let b = self.hidden;
        let pre = self.gate_preacts(&x, &h_prev);
        let i: Vec<S> = (0..b).map(|u| pre[u].sigmoid()).collect();
        let f: Vec<S> = (0..b).map(|u| pre[b + u].sigmoid()).collect();
        let g: Vec<S> = (0..b).map(|u| pre[2 * b + u].tanh()).collect();
        let o: Vec<S> = (0..b).map(|u| pre[3 * b + u].sigmoid()).collect();
        let c: Vec<S> = (0..b).map(|u| f[u] * c_prev[u] + i[u] * g[u]).collect();
        let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<S> = (0..b).map(|u| o[u] * tanh_c[u]).collect();
        let cache = LstmStepCache {
            x,
            h_prev,
            c_prev,
            i,
            f,
            g,
            o,
            tanh_c,
        };
        (h, c, cache)
    }

    /// One BPTT step. `dh` and `dc` are the gradients flowing into h_t
    /// and c_t; returns (dx, dh_prev, dc_prev).
    pub fn backward_step(
        &self,
        cache: &LstmStepCache<S>,
        dh: &[S],
        dc_in: &[S],
        grads: &mut Lstm<S>,
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let b = self.hidden;
        let one = S::ONE;
        // dc = dc_in + dh * o * (1 - tanh(c)^2)
        let mut dpre = vec![S::ZERO; GATES * b];
        let mut dc_prev = vec![S::ZERO; b];
        for u in 0..b {
            let dtanh = one - cache.tanh_c[u] * cache.tanh_c[u];
            let dc = dc_in[u] + dh[u] * cache.o[u] * dtanh;
            let d_o = dh[u] * cache.tanh_c[u];
            let d_i = dc * cache.g[u];
            let d_f = dc * cache.c_prev[u];
            let d_g = dc * cache.i[u];
            dc_prev[u] = dc * cache.f[u];
            dpre[u] = d_i * cache.i[u] * (one - cache.i[u]);
            dpre[b + u] = d_f * cache.f[u] * (one - cache.f[u]);
            dpre[2 * b + u] = d_g * (one - cache.g[u] * cache.g[u]);
            dpre[3 * b + u] = d_o * cache.o[u] * (one - cache.o[u]);
        }
        let mut dx = vec![S::ZERO; self.input_dim];
        let mut dh_prev = vec![S::ZERO; b];
        for gate in 0..GATES {
            for u in 0..b {
                let dp = dpre[gate * b + u];
                if dp == S::ZERO {
                    continue;
                }
                grads.bias[gate * b + u] += dp;
                let row = (gate * b + u) * self.input_dim;
                let grow = &mut grads.w_ih[row..row + self.input_dim];
                let wrow = &self.w_ih[row..row + self.input_dim];
                for k in 0..self.input_dim {
                    grow[k] += dp * cache.x[k];
                    dx[k] += dp * wrow[k];
                }
                let hrow = (gate * b + u) * b;
                let ghrow = &mut grads.w_hh[hrow..hrow + b];
                let whrow = &self.w_hh[hrow..hrow + b];
                for k in 0..b {
                    ghrow[k] += dp * cache.h_prev[k];
                    dh_prev[k] += dp * whrow[k];
                }
            }
        }
        (dx, dh_prev, dc_prev)
    }

    /// Run the whole sequence from zero initial state; returns hidden
    /// states per step and the caches for BPTT.
    pub fn forward_seq(&self, xs: &[Vec<S>]) -> (Vec<Vec<S>>, Vec<LstmStepCache<S>>) {
        let mut h = vec![S::ZERO; self.hidden];
        let mut c = vec![S::ZERO; self.hidden];
        let mut hs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let (h_new, c_new, cache) = self.forward_step(x.clone(), h, c);
            h = h_new.clone();
            c = c_new;
            hs.push(h_new);
            caches.push(cache);
        }
        (hs, caches)
    }

    /// Full BPTT given the per-step gradients on the hidden outputs;
    /// returns per-step input gradients.
    pub fn backward_seq(
        &self,
        caches: &[LstmStepCache<S>],
        dh_seq: &[Vec<S>],
        grads: &mut Lstm<S>,
    ) -> Vec<Vec<S>> {
        assert_eq!(caches.len(), dh_seq.len());
        let b = self.hidden;
        let mut dxs = vec![Vec::new(); caches.len()];
        let mut dh_carry = vec![S::ZERO; b];
        let mut dc_carry = vec![S::ZERO; b];
        for t in (0..caches.len()).rev() {
            let dh: Vec<S> = (0..b).map(|u| dh_seq[t][u] + dh_carry[u]).collect();
            let (dx, dh_prev, dc_prev) = self.backward_step(&caches[t], &dh, &dc_carry, grads);
            dxs[t] = dx;
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        dxs
    }
}

impl<S: Scalar> Tensors<S> for Lstm<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        vec![
            (
                "w_ih".into(),
                vec![GATES, self.hidden, self.input_dim],
                self.w_ih.as_slice(),
            ),
            (
                "w_hh".into(),
                vec![GATES, self.hidden, self.hidden],
                self.w_hh.as_slice(),
            ),
            ("bias".into(), vec![GATES, self.hidden], self.bias.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        vec![
            (
                "w_ih".into(),
                vec![GATES, self.hidden, self.input_dim],
                self.w_ih.as_mut_slice(),
            ),
            (
                "w_hh".into(),
                vec![GATES, self.hidden, self.hidden],
                self.w_hh.as_mut_slice(),
            ),
            (
                "bias".into(),
                vec![GATES, self.hidden],
                self.bias.as_mut_slice(),
            ),
        ]
    }
}
