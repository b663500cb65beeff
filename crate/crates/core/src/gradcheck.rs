//! Finite-difference audit of the TAP head's analytic gradients.
//!
//! The scalar checked is the logit itself. Parameters start from the seeded
//! initialisation plus Gaussian jitter, so biases, LN affines and the probe are
//! away from their special initial values. Relative error per tensor is
//! `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, SCALE_FLOOR)`.
//!
//! The floor matters for the key bias: a bias shared by all keys shifts every
//! score of a head by the same amount, softmax ignores it, and its exact
//! gradient is zero. Its finite difference is pure rounding noise.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{tap_backward_with_input, Classifier, Parameters, TapConfig, TapParams};
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_JITTER: f64 = 0.3;
pub const TOLERANCE: f64 = 1e-6;
pub const SCALE_FLOOR: f64 = 1e-3;

const JITTER_STREAM: u64 = 0x4a49_5454; // "JITT"
const TOKEN_STREAM: u64 = 0x544f_4b4e; // "TOKN"

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub config: TapConfig,
    pub n_tokens: usize,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
    pub input: TensorCheck,
}

impl GradcheckReport {
    /// Largest relative error over parameter tensors.
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance && self.input.rel_err < tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    (abs, abs / scale)
}

/// Seeded jittered parameters and random tokens used by the audit.
pub fn audit_inputs(config: TapConfig, n_tokens: usize, jitter: f64) -> Result<(TapParams, Matrix)> {
    let mut params = TapParams::init(config)?;
    let mut r = rng::seeded(rng::derive_seed(config.seed, JITTER_STREAM, 0));
    let noise = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("positive std");
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += noise.sample(&mut r);
        }
    }
    let mut r = rng::seeded(rng::derive_seed(config.seed, TOKEN_STREAM, 0));
    let data = (0..n_tokens * config.dim)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    Ok((params, Matrix::from_vec(n_tokens, config.dim, data)?))
}

pub fn gradcheck_tap(config: TapConfig, n_tokens: usize, step: f64) -> Result<GradcheckReport> {
    let (params, tokens) = audit_inputs(config, n_tokens, DEFAULT_JITTER)?;
    let (_, cache) = params.forward(&tokens)?;
    let (grads, dtokens) = tap_backward_with_input(&params, &cache, 1.0)?;

    let analytic: Vec<(&'static str, Vec<f64>)> =
        grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + step;
            let fp = probe.logit(&tokens)?;
            probe.tensors_mut()[ti].1[i] = orig - step;
            let fm = probe.logit(&tokens)?;
            probe.tensors_mut()[ti].1[i] = orig;
            *slot = (fp - fm) / (2.0 * step);
        }
        let (max_abs_err, rel_err) = relative_error(a, &numeric);
        tensors.push(TensorCheck {
            name: name.to_string(),
            len: a.len(),
            max_abs_err,
            rel_err,
        });
    }

    let mut x = tokens.clone();
    let mut numeric = vec![0.0; x.data().len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let fp = params.logit(&x)?;
        x.data_mut()[i] = orig - step;
        let fm = params.logit(&x)?;
        x.data_mut()[i] = orig;
        *slot = (fp - fm) / (2.0 * step);
    }
    let (max_abs_err, rel_err) = relative_error(dtokens.data(), &numeric);
    Ok(GradcheckReport {
        config,
        n_tokens,
        step,
        tensors,
        input: TensorCheck {
            name: "tokens".into(),
            len: numeric.len(),
            max_abs_err,
            rel_err,
        },
    })
}
