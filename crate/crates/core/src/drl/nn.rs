//! Dense tanh networks with hand-written reverse-mode gradients, and Adam.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// Fully connected layer, `weight` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Orthogonal weights scaled by `gain`, zero bias.
    pub fn orthogonal(in_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let (rows, cols) = (out_dim.max(in_dim), out_dim.min(in_dim));
        let a = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let qr = a.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mut layer = Self::zeros(in_dim, out_dim);
        for o in 0..out_dim {
            for i in 0..in_dim {
                let v = if out_dim >= in_dim { q[(o, i)] } else { q[(i, o)] };
                layer.weight[o * in_dim + i] = gain * v;
            }
        }
        layer
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Multilayer perceptron: tanh on every hidden layer, identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs saved by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Hidden layers use `hidden_gain`,
    /// the output layer `output_gain`.
    pub fn new(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut Rng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { output_gain } else { hidden_gain };
                Linear::orthogonal(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward(&h, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        (h, MlpCache { inputs })
    }

    /// Accumulate ∂loss/∂params into `grads` given ∂loss/∂output.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut Mlp) {
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if i == 0 {
                break;
            }
            // input of layer i is tanh output of layer i-1
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.params_mut().for_each(|p| *p *= k);
    }

    pub fn sq_norm(&self) -> f64 {
        self.params().map(|p| p * p).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-5 }
    }
}

/// First and second moment estimates for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Mlp,
    pub v: Mlp,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self { m: net.zeros_like(), v: net.zeros_like() }
    }

    /// One bias-corrected step; `t` is the 1-based step count.
    pub fn step(&mut self, net: &mut Mlp, grads: &Mlp, t: u64, cfg: &AdamConfig) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let step = cfg.learning_rate * bc2.sqrt() / bc1;
        for (((p, g), m), v) in net.params_mut().zip(grads.params()).zip(self.m.params_mut()).zip(self.v.params_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + cfg.eps * bc2.sqrt());
        }
    }
}
