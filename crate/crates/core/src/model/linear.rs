//! `cls`-only linear probe: the baseline without attention pooling.

use super::{Classifier, Linear, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classifier: Linear,
    pub seed: u64,
}

impl LinearProbe {
    /// Glorot-uniform weights, zero bias.
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("probe dimension must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        Ok(LinearProbe {
            classifier: Linear::glorot(dim, 1, &mut r),
            seed,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        LinearProbe {
            classifier: Linear::zeros(dim, 1),
            seed: 0,
        }
    }

    pub fn from_parts(weight: Vec<f64>, bias: f64) -> Self {
        let dim = weight.len();
        LinearProbe {
            classifier: Linear {
                weight: Matrix::from_vec(dim, 1, weight).expect("column vector"),
                bias: vec![bias],
            },
            seed: 0,
        }
    }
}

impl Parameters for LinearProbe {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        vec![
            Tensor {
                name: "classifier.weight",
                shape: vec![self.classifier.weight.rows(), 1],
                data: self.classifier.weight.data(),
            },
            Tensor {
                name: "classifier.bias",
                shape: vec![1],
                data: &self.classifier.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("classifier.weight", self.classifier.weight.data_mut()),
            ("classifier.bias", &mut self.classifier.bias[..]),
        ]
    }
}

impl Classifier for LinearProbe {
    /// The `cls` row.
    type Cache = Vec<f64>;

    fn dim(&self) -> usize {
        self.classifier.input_dim()
    }

    fn forward(&self, tokens: &Matrix) -> Result<(f64, Vec<f64>)> {
        if tokens.cols() != self.dim() {
            return Err(Error::dim("record embedding width", self.dim(), tokens.cols()));
        }
        if tokens.rows() == 0 {
            return Err(Error::dim("token count", 1, 0));
        }
        let cls = tokens.row(0).to_vec();
        let logit = self.classifier.apply(&cls)[0];
        if !logit.is_finite() {
            return Err(Error::NonFiniteIntermediate { stage: "classifier" });
        }
        Ok((logit, cls))
    }

    fn accumulate_grad(&self, cache: &Vec<f64>, dlogit: f64, grads: &mut Self) -> Result<()> {
        if cache.len() != self.dim() {
            return Err(Error::StaleCache(format!(
                "cls row of width {} for probe of width {}",
                cache.len(),
                self.dim()
            )));
        }
        self.classifier.backward_vec(cache, &[dlogit], &mut grads.classifier);
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = LinearProbe::zeros(self.dim());
        z.seed = self.seed;
        z
    }
}
