//! `tap`: train, evaluate and audit attention-pooling detector heads on
//! exported token features.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tap_core::error::ErrorKind;
use tap_core::synth::SynthMode;

/// Worker threads for data-parallel gradient and evaluation passes.
pub const THREADS_ENV: &str = "TAP_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "tap",
    version,
    about = "Attention-pooling detector head over frozen token features"
)]
#[command(after_help = "Examples:
  tap synth --out data/synth --seed 1
  tap train --train data/synth/train.tfrb --val data/synth/test.tfrb --out runs/tap
  tap eval --checkpoint runs/tap/model.tapc --data data/synth/test.tfrb --out runs/tap/eval
  tap gradcheck --d 8 --n 9 --heads 2 --seed 7")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate planted-artifact train/test feature files
    Synth(SynthArgs),
    /// Fit a TAP head or a cls-only linear probe
    Train(TrainArgs),
    /// Score feature files with a checkpoint and write a per-tag report
    Eval(EvalArgs),
    /// Finite-difference audit of the full TAP gradient
    Gradcheck(GradcheckArgs),
    /// Merge eval reports into one table
    Report(ReportArgs),
    /// Print the header and summary statistics of a feature file
    Inspect(InspectArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    PatchSignal,
    ClsSignal,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PatchSignal => SynthMode::PatchSignal,
            ModeArg::ClsSignal => SynthMode::ClsSignal,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory for train.tfrb, test.tfrb and direction.json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Tokens per record, cls included
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    /// Patch rows carrying the artifact in each generated record
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 4.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::PatchSignal)]
    pub mode: ModeArg,
    #[arg(long, default_value = "synth")]
    pub tag: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    Tap,
    Linear,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Training feature files; records are concatenated in the given order
    #[arg(long, required = true, num_args = 1..)]
    pub train: Vec<PathBuf>,
    /// Held-out feature file scored every --eval-every iterations
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for model.tapc and history.jsonl
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadArg::Tap)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 2532)]
    pub iterations: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub wd: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Hidden width of the residual MLP [default: 4 x feature width]
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Projector output width [default: feature width]
    #[arg(long)]
    pub proj: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature files; tags are reported in first-appearance order
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory for report.json, report.csv and report.md
    #[arg(long)]
    pub out: PathBuf,
    /// Predict generated when sigmoid(logit) exceeds this value
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Second checkpoint scored side by side, written as cls_only.*
    #[arg(long)]
    pub cls_only: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Tokens per record, cls included
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// [default: 4 x d]
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// [default: d]
    #[arg(long)]
    pub proj: Option<usize>,
    /// Repeat to audit several seeds
    #[arg(long, default_values_t = [7u64])]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = tap_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = tap_core::gradcheck::TOLERANCE)]
    pub tol: f64,
    /// Print every tensor instead of the worst one per seed
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// report.json files written by `eval`
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    pub file: PathBuf,
    /// Emit JSON instead of text
    #[arg(long)]
    pub json: bool,
}

/// Failures raised by the driver itself rather than the library.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tap_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Io => 3,
                ErrorKind::Data => 4,
                ErrorKind::Numerical => 5,
            };
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Numerical(_) => 5,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Report(a) => commands::report(&a),
        Command::Inspect(a) => commands::inspect(&a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
