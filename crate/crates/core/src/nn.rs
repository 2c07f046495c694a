//! Small dense networks with manual backpropagation and Adam.
//!
//! Batches are column-major: each column of an input matrix is one sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NnError {
    #[error("input has {got} rows, network expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("layer shapes are inconsistent")]
    Shape,
}

/// Fully connected network: `tanh` on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `weights[l]` has shape `(out, in)`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    inputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.inputs.last().expect("non-empty cache")
    }
}

/// Gradients shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .map(|w| w.as_slice())
            .chain(self.biases.iter().map(|b| b.as_slice()))
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let (ws, bs) = (&mut self.weights, &mut self.biases);
        ws.iter_mut()
            .map(|w| w.as_mut_slice())
            .chain(bs.iter_mut().map(|b| b.as_mut_slice()))
            .collect()
    }
}

impl Mlp {
    /// Layer widths `sizes = [input, hidden.., output]`. Weights are drawn
    /// from `N(0, gain²/fan_in)`, with `output_gain` for the last layer;
    /// biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(rng)));
            biases.push(DVector::zeros(fan_out));
        }
        Mlp { weights, biases }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            weights: sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: sizes.windows(2).map(|w| DVector::zeros(w[1])).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(NnError::Shape);
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(NnError::Shape);
            }
            if l > 0 && self.weights[l - 1].nrows() != w.ncols() {
                return Err(NnError::Shape);
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_size(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.last().expect("non-empty").nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let (ws, bs) = (&mut self.weights, &mut self.biases);
        ws.iter_mut()
            .map(|w| w.as_mut_slice())
            .chain(bs.iter_mut().map(|b| b.as_mut_slice()))
            .collect()
    }

    fn check_input(&self, rows: usize) -> Result<(), NnError> {
        if rows != self.input_size() {
            return Err(NnError::InputSize {
                expected: self.input_size(),
                got: rows,
            });
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>, NnError> {
        self.check_input(x.len())?;
        let mut h = DVector::from_column_slice(x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &h + b;
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            h = z;
        }
        Ok(h)
    }

    /// Batched forward pass keeping the intermediate activations.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(x.nrows())?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len() + 1);
        inputs.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * inputs.last().expect("non-empty");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            inputs.push(z);
        }
        Ok(ForwardCache { inputs })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `d_out = ∂L/∂output`, and
    /// returns `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &DMatrix<f64>,
        grads: &mut MlpGrads,
    ) -> DMatrix<f64> {
        let mut delta = d_out.clone();
        for l in (0..self.weights.len()).rev() {
            if l + 1 < self.weights.len() {
                // tanh'(z) = 1 − h²
                let h = &cache.inputs[l + 1];
                delta.zip_apply(h, |d, hv| *d *= 1.0 - hv * hv);
            }
            let input = &cache.inputs[l];
            grads.weights[l].gemm(1.0, &delta, &input.transpose(), 1.0);
            for col in delta.column_iter() {
                grads.biases[l] += col;
            }
            delta = self.weights[l].transpose() * &delta;
        }
        delta
    }
}

/// Adam optimizer state for a list of parameter slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads` (a gradient of a loss to minimize).
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            assert_eq!(p.len(), g.len(), "parameter group size");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Euclidean norm across several gradient groups.
pub fn global_norm(groups: &[&[f64]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
