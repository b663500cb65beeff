//! Planted-artifact synthetic datasets.
//!
//! Every token of every record is iid standard normal in D dimensions. A fixed
//! unit direction `u` is drawn once from the seed. In patch-signal mode a fake
//! record gets `alpha * u` added to `k` distinct patch rows chosen uniformly;
//! the `cls` row is never touched, so it is identically distributed for both
//! classes. In cls-signal mode `alpha * u` is added to the `cls` row only.
//!
//! `u` depends on the seed alone, while records depend on `(seed, split)`, so
//! train and test splits share the artifact direction.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureDataset, Label, TokenFeatureRecord};
use crate::linalg::dot;
use crate::rng;

const DIRECTION_STREAM: u64 = 0x4449_5245; // "DIRE"
const RECORD_STREAM: u64 = 0x5245_4344; // "RECD"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    PatchSignal,
    ClsSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    /// Tokens per record, `cls` included.
    pub tokens: usize,
    /// Artifact-bearing patch rows per fake record.
    pub k: usize,
    pub alpha: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    /// Selects an independent record stream under the same direction.
    pub split: u64,
    pub mode: SynthMode,
    pub tag: String,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 2 || self.tokens < 2 {
            return bad(format!(
                "need dim >= 2 and tokens >= 2, got {} and {}",
                self.dim, self.tokens
            ));
        }
        if self.k < 1 || self.k > self.tokens - 1 {
            return bad(format!("k = {} must lie in 1..={}", self.k, self.tokens - 1));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be finite and non-negative", self.alpha));
        }
        if self.tag.len() > crate::feature_store::MAX_TAG_LEN {
            return bad("tag longer than 64 bytes".into());
        }
        Ok(())
    }
}

/// The artifact direction for `seed`: a unit vector in `dim` dimensions.
pub fn artifact_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(rng::derive_seed(seed, DIRECTION_STREAM, 0));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn record(config: &SynthConfig, u: &[f64], index: usize, label: Label) -> TokenFeatureRecord {
    let (n, d) = (config.tokens, config.dim);
    let stream = RECORD_STREAM.wrapping_add(config.split);
    let mut r = rng::seeded(rng::derive_seed(config.seed, stream, index as u64));
    let mut tokens: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    if label == Label::Generated {
        let rows: Vec<usize> = match config.mode {
            SynthMode::ClsSignal => vec![0],
            SynthMode::PatchSignal => {
                let mut candidates: Vec<usize> = (1..n).collect();
                // Partial Fisher-Yates: the first k slots are a uniform k-subset.
                for i in 0..config.k {
                    let j = i + rng::below(&mut r, candidates.len() - i);
                    candidates.swap(i, j);
                }
                candidates.truncate(config.k);
                candidates
            }
        };
        for row in rows {
            for (t, ui) in tokens[row * d..(row + 1) * d].iter_mut().zip(u) {
                *t += config.alpha * ui;
            }
        }
    }
    TokenFeatureRecord::new(
        label,
        config.tag.clone(),
        n,
        tokens.into_iter().map(|x| x as f32).collect(),
    )
}

/// Reals first, then fakes. Deterministic in `(seed, split)`.
pub fn generate_planted_dataset(config: &SynthConfig) -> Result<(FeatureDataset, Vec<f64>)> {
    config.validate()?;
    let u = artifact_direction(config.dim, config.seed);
    let labels =
        std::iter::repeat_n(Label::Real, config.n_real).chain(std::iter::repeat_n(Label::Generated, config.n_fake));
    let records = labels
        .enumerate()
        .map(|(i, label)| record(config, &u, i, label))
        .collect();
    Ok((FeatureDataset::new(config.dim, records)?, u))
}

/// Max over patch rows of `<row, u>`; `-inf` for a `cls`-only record.
pub fn oracle_score(record: &TokenFeatureRecord, u: &[f64]) -> Result<f64> {
    if record.dim() != u.len() {
        return Err(Error::dim("oracle direction", record.dim(), u.len()));
    }
    Ok((1..record.n_tokens)
        .map(|i| record.row(i).iter().zip(u).map(|(&x, &ui)| x as f64 * ui).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Sidecar describing the planted direction, written next to TFRB outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSidecar {
    pub dim: usize,
    pub tokens: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub mode: SynthMode,
    pub direction: Vec<f64>,
}

impl DirectionSidecar {
    pub fn new(config: &SynthConfig, direction: Vec<f64>) -> Self {
        DirectionSidecar {
            dim: config.dim,
            tokens: config.tokens,
            k: config.k,
            alpha: config.alpha,
            seed: config.seed,
            mode: config.mode,
            direction,
        }
    }
}
