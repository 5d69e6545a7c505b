//! Small fully connected networks with hand-written backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Dense layer, weights stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// MLP with leaky-ReLU on every hidden layer and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    layers: Vec<Dense>,
}

/// Pre-activation values of each layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

impl TinyNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::ShapeMismatch(format!("layer {i} tensor sizes")));
            }
            if !l.weight.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("layer {i} has non-finite weights")));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer widths {} -> {} do not chain",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `widths = [in, hidden.., out]` with all parameters zero.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least input and output width");
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    /// Uniform init in `±gain / sqrt(fan_in)`, zero biases.
    pub fn random(widths: &[usize], seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(widths);
        for l in &mut net.layers {
            let b = gain / (l.inputs.max(1) as f64).sqrt();
            for w in &mut l.weight {
                *w = rng.random_range(-b..=b);
            }
        }
        net
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = leaky_relu(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let src = if i == 0 { x } else { &post[i - 1] };
            let mut z = Vec::new();
            l.apply(src, &mut z);
            let a = if i < last {
                z.iter().map(|&v| leaky_relu(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        Ok(Trace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// Returns (flat parameter gradient in [`Self::params`] order, input gradient).
    pub fn backward(&self, trace: &Trace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let last = self.layers.len() - 1;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i < last {
                for (gv, &z) in g.iter_mut().zip(&trace.pre[i]) {
                    if z <= 0.0 {
                        *gv *= LEAKY_SLOPE;
                    }
                }
            }
            let src = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            let (gw, gb) = &mut grads[i];
            let mut gin = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                gb[o] += g[o];
                let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                for j in 0..l.inputs {
                    gw[o * l.inputs + j] += g[o] * src[j];
                    gin[j] += g[o] * row[j];
                }
            }
            g = gin;
        }
        let flat = grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
        (flat, g)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened as `[w0, b0, w1, b1, ..]`.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                got: p.len(),
            });
        }
        let mut it = p.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub beta: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, beta: f64, n: usize) -> Self {
        Self {
            lr,
            beta,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.beta * *v + g;
            *p -= self.lr * *v;
        }
    }
}
