//! Dense layers and MLPs over a flat parameter slice, with explicit
//! reverse-mode backward passes, plus an Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::params::LayoutBuilder;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    /// Row-major `[output][input]`.
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    pub fn new(builder: &mut LayoutBuilder, name: &str, input: usize, output: usize) -> Self {
        let weight = builder.add(format!("{name}.weight"), &[output, input]);
        let bias = builder.add(format!("{name}.bias"), &[output]);
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    #[inline]
    pub fn forward_into(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &params[self.weight..self.weight + self.input * self.output];
        let b = &params[self.bias..self.bias + self.output];
        for (o, out) in y.iter_mut().enumerate() {
            let row = &w[o * self.input..(o + 1) * self.input];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *out = acc;
        }
    }
}

/// Multi-layer perceptron with ReLU between layers; `relu_last` also
/// rectifies the final layer (PointNet-style shared point MLPs).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[i]` the
/// (post-activation) output of layer `i - 1`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

impl Mlp {
    pub fn new(builder: &mut LayoutBuilder, name: &str, dims: &[usize], relu_last: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(builder, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, relu_last }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    fn rectified(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_last
    }

    /// He-normal weights for rectified layers, LeCun-normal for a linear
    /// output layer; zero biases.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for (i, l) in self.layers.iter().enumerate() {
            let gain = if self.rectified(i) { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / l.input as f64).sqrt()).expect("valid std");
            for w in &mut params[l.weight..l.weight + l.input * l.output] {
                *w = normal.sample(rng);
            }
            for b in &mut params[l.bias..l.bias + l.output] {
                *b = 0.0;
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> MlpTrace {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; l.output];
            l.forward_into(params, &acts[i], &mut y);
            if self.rectified(i) {
                for v in &mut y {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(y);
        }
        MlpTrace { acts }
    }

    /// Back-propagate `d_out` through a recorded pass. Parameter gradients
    /// are accumulated into `grad`; the input gradient is written to `d_in`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        d_out: &[f64],
        mut grad: Option<&mut [f64]>,
        d_in: Option<&mut [f64]>,
    ) {
        let mut delta = d_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let y = &trace.acts[i + 1];
            let x = &trace.acts[i];
            if self.rectified(i) {
                for (d, yv) in delta.iter_mut().zip(y) {
                    if *yv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    g[l.bias + o] += d;
                    let row = &mut g[l.weight + o * l.input..l.weight + (o + 1) * l.input];
                    for (gw, xv) in row.iter_mut().zip(x) {
                        *gw += d * xv;
                    }
                }
            }
            if i == 0 && d_in.is_none() {
                break;
            }
            let w = &params[l.weight..l.weight + l.input * l.output];
            let mut prev = vec![0.0; l.input];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * l.input..(o + 1) * l.input];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            delta = prev;
        }
        if let Some(d) = d_in {
            d.copy_from_slice(&delta);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log(sum(exp(logits)))`, stable.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Huber-style smooth L1 with unit transition; returns `(value, d/dx)`.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
