//! Classifier heads over a record's token matrix.
//!
//! Both heads expose their trainable tensors through [`Parameters`] in a fixed
//! order; that order defines optimizer-state layout and checkpoint layout.
//! Gradients are carried in a value of the same type as the parameters.

mod linear;
mod tap;

pub use linear::LinearProbe;
pub use tap::{
    attention_pool, residual_mlp, tap_backward, tap_backward_with_input, tap_forward, AttentionCache, ForwardCache,
    MlpCache, TapConfig, TapGrads, TapParams,
};

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::linalg::{axpy, Matrix};
use crate::rng::Rng;

/// Named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct Tensor<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameters {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += alpha * other`; both must have the same layout.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            axpy(alpha, s.data, dst);
        }
    }
}

pub trait Classifier: Parameters + Clone + Send + Sync {
    type Cache: Send;

    /// Embedding width D the head expects.
    fn dim(&self) -> usize;

    fn forward(&self, tokens: &Matrix) -> Result<(f64, Self::Cache)>;

    fn logit(&self, tokens: &Matrix) -> Result<f64> {
        Ok(self.forward(tokens)?.0)
    }

    /// Adds `dlogit * d(logit)/d(theta)` into `grads`.
    fn accumulate_grad(&self, cache: &Self::Cache, dlogit: f64, grads: &mut Self) -> Result<()>;

    fn zeros_like(&self) -> Self;
}

/// Either trained head, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Tap(TapParams),
    Linear(LinearProbe),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Tap(p) => p.dim(),
            Model::Linear(p) => p.dim(),
        }
    }

    pub fn logit(&self, tokens: &Matrix) -> Result<f64> {
        match self {
            Model::Tap(p) => p.logit(tokens),
            Model::Linear(p) => p.logit(tokens),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Tap(_) => "tap",
            Model::Linear(_) => "linear",
        }
    }
}

pub(crate) fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub(crate) fn normal_vec(len: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Affine map `x W + b` with `W` stored in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub(crate) fn glorot(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: glorot_uniform(input, output, rng),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x W + b` for a single row vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.weight.row(i), &mut y);
            }
        }
        y
    }

    /// Accumulates `dW += x^T dy`, `db += dy` into `grads` and returns `W dy`.
    pub(crate) fn backward_vec(&self, x: &[f64], dy: &[f64], grads: &mut Linear) -> Vec<f64> {
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, dy, grads.weight.row_mut(i));
        }
        axpy(1.0, dy, &mut grads.bias);
        (0..self.input_dim())
            .map(|i| crate::linalg::dot(self.weight.row(i), dy))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }
}
