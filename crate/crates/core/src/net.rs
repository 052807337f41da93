//! Minimal feed-forward network with manual backpropagation.
//!
//! Hidden layers use tanh (smooth, so finite-difference checks are
//! well-posed); the output layer is linear. Weights are initialized
//! uniformly in [−s, s] with s = 1/√fan_in from a seeded stream.

use crate::error::{Error, Result};
use crate::rng::GaussStream;

/// Feed-forward network. Forward and backward are pure functions over the
/// (immutable) weights; training mutates weights single-threaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// Per layer, row-major (out_dim x in_dim).
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Activations recorded by [`Mlp::forward_trace`]; `acts[0]` is the input.
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Gradients of a scalar objective with respect to every parameter and
/// the input, in the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input: vec![0.0; net.dims[0]],
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut GaussStream) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidRange(format!("bad layer dims {dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| (rng.uniform() * 2.0 - 1.0) * s)
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidRange(format!("bad layer dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights: (0..dims.len() - 1)
                .map(|l| vec![0.0; dims[l] * dims[l + 1]])
                .collect(),
            biases: (1..dims.len()).map(|l| vec![0.0; dims[l]]).collect(),
        })
    }

    /// Rebuild from raw parts (checkpoint loading); shapes are validated.
    pub fn from_parts(dims: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if dims.len() < 2 || weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(Error::ShapeMismatch("layer count".into()));
        }
        for l in 0..dims.len() - 1 {
            if weights[l].len() != dims[l] * dims[l + 1] || biases[l].len() != dims[l + 1] {
                return Err(Error::ShapeMismatch(format!("layer {l} parameter shape")));
            }
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_weights(&self, l: usize) -> &[f64] {
        &self.weights[l]
    }

    pub fn layer_biases(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} vs expected {}",
                input.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.acts.pop().unwrap())
    }

    /// Forward pass keeping per-layer activations for backprop.
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let n_layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let prev = &acts[l];
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (x, wi) in prev.iter().zip(row) {
                    acc += x * wi;
                }
                out[o] += acc;
            }
            if l + 1 < n_layers {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Gradients of ⟨output, output_grad⟩ with respect to every parameter
    /// and the input, given the trace of the matching forward pass.
    pub fn backward(&self, trace: &Trace, output_grad: &[f64]) -> Result<MlpGrads> {
        let mut grads = MlpGrads::zeros_like(self);
        self.backward_into(trace, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating backward pass for batch training: parameter gradients
    /// are added into `grads` (`+=`), the input gradient is overwritten.
    pub fn backward_into(
        &self,
        trace: &Trace,
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<()> {
        let n_layers = self.dims.len() - 1;
        if output_grad.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "output_grad dim {} vs expected {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if trace.acts.len() != n_layers + 1 || trace.acts[0].len() != self.dims[0] {
            return Err(Error::ShapeMismatch("trace does not match network".into()));
        }
        if grads.input.len() != self.dims[0] || grads.weights.len() != n_layers {
            return Err(Error::ShapeMismatch("gradient buffers".into()));
        }
        // d_pre: gradient w.r.t. the pre-activation of the current layer.
        let mut d_pre = output_grad.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let prev = &trace.acts[l];
            for o in 0..fan_out {
                let g = d_pre[o];
                grads.biases[l][o] += g;
                let row = &mut grads.weights[l][o * fan_in..(o + 1) * fan_in];
                for (slot, x) in row.iter_mut().zip(prev) {
                    *slot += g * x;
                }
            }
            // Gradient w.r.t. the layer input.
            let w = &self.weights[l];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let g = d_pre[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (slot, wi) in d_in.iter_mut().zip(row) {
                    *slot += g * wi;
                }
            }
            if l > 0 {
                // prev is a tanh output: d tanh = 1 - y^2.
                for (slot, y) in d_in.iter_mut().zip(prev) {
                    *slot *= 1.0 - y * y;
                }
            }
            d_pre = d_in;
        }
        grads.input = d_pre;
        Ok(())
    }
}

/// Adam optimizer state over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[usize]) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidRange(format!("learning rate {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidRange(format!("learning rate {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// One adaptive-moment update over all tensors; increments the counter.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer tensor count".into()));
        }
        for i in 0..params.len() {
            if params[i].len() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("optimizer tensor {i}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut *params[i];
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
