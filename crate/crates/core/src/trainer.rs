//! Loss, training loop and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorKind, Result};
use crate::feature_store::{batch_iter, FeatureDataset, Label, TokenFeatureRecord};
use crate::linalg::Matrix;
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::{Classifier, LinearProbe, Model, TapConfig, TapParams};
use crate::optimizer::{adamw_step, lr_at, AdamWHyper, OptimizerState, Schedule};
use crate::rng;

/// Records per gradient partial sum. Partial sums are reduced in chunk order,
/// so results do not depend on the worker count.
pub const GRAD_CHUNK: usize = 8;

const SHUFFLE_STREAM: u64 = 0x5348_5546; // "SHUF"

/// Sigmoid binary cross-entropy on one logit: `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, label: Label) -> Result<(f64, f64)> {
    if !logit.is_finite() {
        return Err(Error::non_finite("logit"));
    }
    let y = label.as_f64();
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    Ok((softplus - y * logit, sigmoid(logit) - y))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyper: AdamWHyper,
    pub schedule: Schedule,
    /// Validate every this many iterations, when a validation set is given.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2532,
            batch_size: 128,
            seed: 0,
            hyper: AdamWHyper::default(),
            schedule: Schedule::default(),
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::InvalidConfig("eval cadence must be at least 1".into()));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<ValSummary>,
}

/// One JSON object per line.
pub fn history_to_jsonl(history: &[HistoryEntry]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).expect("plain struct") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<C> {
    pub model: C,
    pub optimizer: OptimizerState,
    pub history: Vec<HistoryEntry>,
}

fn batch_loss_and_grad<C: Classifier>(model: &C, records: &[&TokenFeatureRecord]) -> Result<(f64, C)> {
    let scale = 1.0 / records.len() as f64;
    let partials: Vec<Result<(f64, C)>> = records
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = model.zeros_like();
            let mut loss = 0.0;
            for r in chunk {
                let (logit, cache) = model.forward(&r.to_matrix())?;
                let (l, dlogit) = bce_with_logit(logit, r.label)?;
                loss += l;
                model.accumulate_grad(&cache, dlogit * scale, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total_loss = 0.0;
    let mut total = model.zeros_like();
    for p in partials {
        let (l, g) = p?;
        total_loss += l;
        total.add_scaled(1.0, &g);
    }
    Ok((total_loss * scale, total))
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e.kind() {
        ErrorKind::Numerical => Error::Diverged {
            quantity: e.to_string(),
            iteration,
        },
        _ => e,
    }
}

/// Runs exactly `config.iterations` AdamW steps over reshuffled epochs of
/// `train_ds`, starting from `model`.
pub fn train<C: Classifier>(
    config: &TrainConfig,
    mut model: C,
    train_ds: &FeatureDataset,
    val_ds: Option<&FeatureDataset>,
) -> Result<TrainOutcome<C>> {
    config.validate()?;
    if train_ds.dim() != model.dim() {
        return Err(Error::dim("training set width", model.dim(), train_ds.dim()));
    }
    if let Some(v) = val_ds {
        if v.dim() != model.dim() {
            return Err(Error::dim("validation set width", model.dim(), v.dim()));
        }
    }
    let mut state = OptimizerState::new(&model);
    let mut history = Vec::with_capacity(config.iterations);
    let mut epoch = 0u64;
    let epoch_seed = |e: u64| Some(rng::derive_seed(config.seed, SHUFFLE_STREAM, e));
    let mut batches = batch_iter(train_ds, config.batch_size, epoch_seed(epoch))?;

    for it in 0..config.iterations {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = batch_iter(train_ds, config.batch_size, epoch_seed(epoch))?;
                batches.next().expect("dataset is non-empty")
            }
        };
        let lr = lr_at(&config.schedule, config.hyper.lr, it, config.iterations)?;
        let (loss, grads) = batch_loss_and_grad(&model, &batch.records).map_err(diverged(it))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                quantity: "loss".into(),
                iteration: it,
            });
        }
        adamw_step(&mut model, &grads, &mut state, &config.hyper, lr).map_err(diverged(it))?;

        let mut entry = HistoryEntry {
            iter: it,
            loss,
            lr,
            val: None,
        };
        if let (Some(every), Some(v)) = (config.eval_every, val_ds) {
            if (it + 1) % every == 0 && !v.is_empty() {
                let report = evaluate(&model, v, 0.5)?;
                entry.val = Some(ValSummary {
                    accuracy: report.overall.metrics.accuracy,
                    f1: report.overall.metrics.f1,
                });
            }
        }
        history.push(entry);
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        history,
    })
}

pub fn train_tap(
    config: &TrainConfig,
    model_cfg: TapConfig,
    train_ds: &FeatureDataset,
    val_ds: Option<&FeatureDataset>,
) -> Result<TrainOutcome<TapParams>> {
    if train_ds.dim() != model_cfg.dim {
        return Err(Error::dim("training set width", model_cfg.dim, train_ds.dim()));
    }
    train(config, TapParams::init(model_cfg)?, train_ds, val_ds)
}

pub fn train_linear(
    config: &TrainConfig,
    init_seed: u64,
    train_ds: &FeatureDataset,
    val_ds: Option<&FeatureDataset>,
) -> Result<TrainOutcome<LinearProbe>> {
    train(config, LinearProbe::init(train_ds.dim(), init_seed)?, train_ds, val_ds)
}

/// Anything that maps a token matrix to a logit.
pub trait Scorer: Sync {
    fn width(&self) -> usize;
    fn score(&self, tokens: &Matrix) -> Result<f64>;
}

impl<C: Classifier> Scorer for C {
    fn width(&self) -> usize {
        self.dim()
    }

    fn score(&self, tokens: &Matrix) -> Result<f64> {
        self.logit(tokens)
    }
}

impl Scorer for Model {
    fn width(&self) -> usize {
        self.dim()
    }

    fn score(&self, tokens: &Matrix) -> Result<f64> {
        self.logit(tokens)
    }
}

/// Per-tag confusion with prediction `sigmoid(logit) > threshold`.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, ds: &FeatureDataset, threshold: f64) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.dim() != model.width() {
        return Err(Error::dim("evaluation set width", model.width(), ds.dim()));
    }
    let logits: Vec<f64> = ds
        .records()
        .par_iter()
        .map(|r| model.score(&r.to_matrix()))
        .collect::<Result<_>>()?;
    let mut per_tag: Vec<(String, ConfusionCounts)> = ds
        .tags()
        .into_iter()
        .map(|t| (t.to_string(), ConfusionCounts::default()))
        .collect();
    for (r, &logit) in ds.records().iter().zip(&logits) {
        let slot = per_tag.iter_mut().find(|(t, _)| *t == r.tag).expect("tag listed");
        slot.1.record(r.label, sigmoid(logit) > threshold);
    }
    Ok(MetricsReport::from_counts(threshold, per_tag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub tap: MetricsReport,
    pub cls_only: MetricsReport,
}

/// Side-by-side reports for the TAP head and the `cls`-only probe.
pub fn compare_cls_only<A: Scorer + ?Sized, B: Scorer + ?Sized>(
    tap: &A,
    cls_only: &B,
    ds: &FeatureDataset,
) -> Result<PairedReport> {
    if tap.width() != cls_only.width() {
        return Err(Error::dim("compared heads", tap.width(), cls_only.width()));
    }
    Ok(PairedReport {
        tap: evaluate(tap, ds, 0.5)?,
        cls_only: evaluate(cls_only, ds, 0.5)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let (l, g) = bce_with_logit(0.0, Label::Generated).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l0, g0) = bce_with_logit(0.0, Label::Real).unwrap();
        assert_eq!(l0, l);
        assert_eq!(g0, 0.5);
        let (l, g) = bce_with_logit(50.0, Label::Generated).unwrap();
        assert!((0.0..1e-20).contains(&l));
        assert!(g.abs() < 1e-20);
        let (l, _) = bce_with_logit(-800.0, Label::Generated).unwrap();
        assert_eq!(l, 800.0);
        assert!(bce_with_logit(f64::NAN, Label::Real).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        for &x in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            for label in [Label::Real, Label::Generated] {
                let h = 1e-6;
                let num =
                    (bce_with_logit(x + h, label).unwrap().0 - bce_with_logit(x - h, label).unwrap().0) / (2.0 * h);
                assert!((bce_with_logit(x, label).unwrap().1 - num).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
