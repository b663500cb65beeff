use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tap_core::checkpoint::{load_checkpoint, Checkpoint};
use tap_core::feature_store::{read_feature_file, read_header};
use tap_core::gradcheck::gradcheck_tap;
use tap_core::metrics::MetricsReport;
use tap_core::optimizer::{AdamWHyper, Schedule};
use tap_core::synth::{generate_planted_dataset, DirectionSidecar, SynthConfig};
use tap_core::trainer::{evaluate, history_to_jsonl, train_linear, train_tap, HistoryEntry, TrainConfig};
use tap_core::{FeatureDataset, Label, Model, TapConfig};

use crate::manifest::{write_atomic, ManifestBuilder};
use crate::{EvalArgs, Failure, GradcheckArgs, HeadArg, InspectArgs, ReportArgs, ScheduleArg, SynthArgs, TrainArgs};

pub const CHECKPOINT_NAME: &str = "model.tapc";
pub const HISTORY_NAME: &str = "history.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    write_atomic(path, &ds.encode()?)
}

/// Reads and concatenates feature files. Widths must agree.
fn load_datasets(paths: &[PathBuf], manifest: &mut ManifestBuilder) -> Result<FeatureDataset> {
    let mut merged: Option<FeatureDataset> = None;
    for path in paths {
        let ds = read_feature_file(path).with_context(|| format!("reading {}", path.display()))?;
        manifest.input(path)?;
        match merged.as_mut() {
            None => merged = Some(ds),
            Some(m) => m.extend(ds).with_context(|| format!("merging {}", path.display()))?,
        }
    }
    merged.ok_or_else(|| Failure::Usage("no feature files given".into()).into())
}

fn split_counts(n: usize) -> (usize, usize) {
    (n / 2, n - n / 2)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut outputs = Vec::new();
    let manifest = ManifestBuilder::start("synth", args, vec![args.seed])?;
    create_dir(&args.out)?;
    for (split, (name, n)) in [("train.tfrb", args.n_train), ("test.tfrb", args.n_test)]
        .into_iter()
        .enumerate()
    {
        let (n_real, n_fake) = split_counts(n);
        let config = SynthConfig {
            dim: args.dim,
            tokens: args.tokens,
            k: args.k,
            alpha: args.alpha,
            n_real,
            n_fake,
            seed: args.seed,
            split: split as u64,
            mode: args.mode.into(),
            tag: args.tag.clone(),
        };
        let (ds, u) = generate_planted_dataset(&config)?;
        let path = args.out.join(name);
        write_dataset(&ds, &path)?;
        println!(
            "wrote {} ({} records, D={}, N={})",
            path.display(),
            ds.len(),
            args.dim,
            args.tokens
        );
        outputs.push(path);
        if split == 0 {
            let sidecar = DirectionSidecar::new(&config, u);
            let path = args.out.join("direction.json");
            write_atomic(&path, (serde_json::to_string_pretty(&sidecar)? + "\n").as_bytes())?;
            outputs.push(path);
        }
    }
    manifest.finish(&args.out, &outputs)?;
    Ok(())
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        iterations: args.iterations,
        batch_size: args.batch,
        seed: args.seed,
        hyper: AdamWHyper {
            lr: args.lr,
            weight_decay: args.wd,
            beta1: args.beta1,
            beta2: args.beta2,
            eps: args.eps,
        },
        schedule: match args.schedule {
            ScheduleArg::Cosine => Schedule::WarmupCosine {
                warmup_fraction: args.warmup_fraction,
            },
            ScheduleArg::Constant => Schedule::Constant,
        },
        eval_every: args.eval_every,
    }
}

fn print_history_tail(history: &[HistoryEntry]) {
    if let Some(last) = history.last() {
        println!(
            "iterations {} final loss {:.6} final lr {:.3e}",
            last.iter + 1,
            last.loss,
            last.lr
        );
    }
    if let Some(h) = history.iter().rev().find(|h| h.val.is_some()) {
        let v = h.val.unwrap();
        println!("val@{} acc {:.4} f1 {:.4}", h.iter + 1, v.accuracy, v.f1);
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.warmup_fraction) {
        return Err(Failure::Usage(format!("--warmup-fraction {} outside [0, 1)", args.warmup_fraction)).into());
    }
    let config = train_config(args);
    config.validate()?;
    let mut manifest = ManifestBuilder::start("train", args, vec![args.seed])?;
    let train_ds = load_datasets(&args.train, &mut manifest)?;
    let val_ds = match &args.val {
        Some(p) => Some(load_datasets(std::slice::from_ref(p), &mut manifest)?),
        None => None,
    };
    create_dir(&args.out)?;

    let dim = train_ds.dim();
    let (model, optimizer, history) = match args.head {
        HeadArg::Tap => {
            let tap_cfg = TapConfig {
                heads: args.heads,
                mlp_hidden: args.mlp_hidden.unwrap_or(4 * dim),
                proj_dim: args.proj.unwrap_or(dim),
                ..TapConfig::new(dim, args.seed)
            };
            let out = train_tap(&config, tap_cfg, &train_ds, val_ds.as_ref())?;
            (Model::Tap(out.model), out.optimizer, out.history)
        }
        HeadArg::Linear => {
            let out = train_linear(&config, args.seed, &train_ds, val_ds.as_ref())?;
            (Model::Linear(out.model), out.optimizer, out.history)
        }
    };
    print_history_tail(&history);

    let ck_path = args.out.join(CHECKPOINT_NAME);
    write_atomic(&ck_path, &Checkpoint::new(model, Some(optimizer)).encode())?;
    let hist_path = args.out.join(HISTORY_NAME);
    write_atomic(&hist_path, history_to_jsonl(&history).as_bytes())?;
    println!("wrote {}", ck_path.display());
    manifest.finish(&args.out, &[ck_path, hist_path])?;
    Ok(())
}

fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&json, (serde_json::to_string_pretty(report)? + "\n").as_bytes())?;
    let csv = dir.join(format!("{stem}.csv"));
    write_atomic(&csv, report.to_csv().as_bytes())?;
    let md = dir.join(format!("{stem}.md"));
    write_atomic(&md, report.to_markdown().as_bytes())?;
    Ok(vec![json, csv, md])
}

fn load_model(path: &Path, manifest: &mut ManifestBuilder) -> Result<Model> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    manifest.input(path)?;
    Ok(ck.model)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Failure::Usage(format!("--threshold {} outside [0, 1]", args.threshold)).into());
    }
    let mut manifest = ManifestBuilder::start("eval", args, Vec::new())?;
    let model = load_model(&args.checkpoint, &mut manifest)?;
    let baseline = match &args.cls_only {
        Some(p) => Some(load_model(p, &mut manifest)?),
        None => None,
    };
    let ds = load_datasets(&args.data, &mut manifest)?;
    create_dir(&args.out)?;

    let report = evaluate(&model, &ds, args.threshold)?;
    println!(
        "{} head, {} records, threshold {}\n",
        model.kind(),
        ds.len(),
        args.threshold
    );
    print!("{}", report.to_markdown());
    let mut outputs = write_report(&report, &args.out, "report")?;
    if let Some(b) = baseline {
        let r = evaluate(&b, &ds, args.threshold)?;
        println!("\ncls-only {} head\n", b.kind());
        print!("{}", r.to_markdown());
        outputs.extend(write_report(&r, &args.out, "cls_only")?);
    }
    manifest.finish(&args.out, &outputs)?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("report", args, Vec::new())?;
    let mut reports = Vec::new();
    for path in &args.input {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        manifest.input(path)?;
        reports.push(r);
    }
    if let Some(first) = reports.first() {
        if let Some(r) = reports.iter().find(|r| r.threshold != first.threshold) {
            return Err(Failure::Usage(format!(
                "reports use different thresholds ({} and {})",
                first.threshold, r.threshold
            ))
            .into());
        }
    }
    let merged = MetricsReport::merge(&reports);
    create_dir(&args.out)?;
    print!("{}", merged.to_markdown());
    let outputs = write_report(&merged, &args.out, "report")?;
    manifest.finish(&args.out, &outputs)?;
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.seed.is_empty() {
        return Err(Failure::Usage("at least one --seed is required".into()).into());
    }
    let mut worst = 0.0f64;
    for &seed in &args.seed {
        let config = TapConfig {
            heads: args.heads,
            mlp_hidden: args.mlp_hidden.unwrap_or(4 * args.d),
            proj_dim: args.proj.unwrap_or(args.d),
            ..TapConfig::new(args.d, seed)
        };
        let report = gradcheck_tap(config, args.n, args.step)?;
        if args.verbose {
            for t in report.tensors.iter().chain(std::iter::once(&report.input)) {
                println!(
                    "  {:<18} n={:<5} abs {:.3e} rel {:.3e}",
                    t.name, t.len, t.max_abs_err, t.rel_err
                );
            }
        }
        let top = report
            .tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("model has tensors");
        println!("seed {seed}: max rel err {:.3e} ({})", report.max_rel_err(), top.name);
        worst = worst.max(report.max_rel_err());
        if report.max_rel_err().is_nan() {
            worst = f64::NAN;
        }
    }
    println!("max rel err {worst:.3e}");
    if worst < args.tol {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("max rel err {worst:.3e} not below {:.0e}", args.tol)).into())
    }
}

#[derive(Serialize)]
struct InspectSummary {
    version: u16,
    dim: u32,
    count: u64,
    real: usize,
    generated: usize,
    tags: Vec<(String, usize)>,
    tokens_min: Option<usize>,
    tokens_max: Option<usize>,
    value_mean: Option<f64>,
    value_std: Option<f64>,
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    let header = read_header(&bytes)?;
    let ds = FeatureDataset::decode(&bytes)?;
    let records = ds.records();
    let tags = ds
        .tags()
        .into_iter()
        .map(|t| (t.to_string(), records.iter().filter(|r| r.tag == t).count()))
        .collect();
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for r in records {
        for &v in &r.tokens {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
        n += r.tokens.len();
    }
    let mean = (n > 0).then(|| sum / n as f64);
    let summary = InspectSummary {
        version: header.version,
        dim: header.dim,
        count: header.count,
        real: records.iter().filter(|r| r.label == Label::Real).count(),
        generated: records.iter().filter(|r| r.label == Label::Generated).count(),
        tags,
        tokens_min: records.iter().map(|r| r.n_tokens).min(),
        tokens_max: records.iter().map(|r| r.n_tokens).max(),
        value_mean: mean,
        value_std: mean.map(|m| (sq / n as f64 - m * m).max(0.0).sqrt()),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    println!("file      {}", args.file.display());
    println!("version   {}", summary.version);
    println!("dim       {}", summary.dim);
    println!("count     {}", summary.count);
    if summary.count == 0 {
        return Ok(());
    }
    println!("labels    real {} generated {}", summary.real, summary.generated);
    for (tag, n) in &summary.tags {
        println!("tag       {tag} {n}");
    }
    println!(
        "tokens    min {} max {}",
        summary.tokens_min.unwrap_or(0),
        summary.tokens_max.unwrap_or(0)
    );
    if let (Some(m), Some(s)) = (summary.value_mean, summary.value_std) {
        println!("values    mean {m:.6} std {s:.6}");
    }
    Ok(())
}
