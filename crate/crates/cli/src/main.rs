//! `cpr`: synthetic data, training, evaluation, ablation sweeps and gradient
//! checks for conditional prototype rectification.
//!
//! Exit codes: 0 on success, 1 for I/O, data and numerical failures, 2 for
//! invalid flags or configuration.

mod commands;
mod run_manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpr::coadapter::Variant;
use cpr::eval::{Axis, Mode};
use cpr::CprError;

#[derive(Debug, Parser)]
#[command(
    name = "cpr",
    version,
    about = "Conditional prototype rectification over frozen embeddings"
)]
struct Cli {
    /// Base directory for every relative path argument.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded Gaussian-mixture dataset (EMB1 files plus manifest).
    Synth(SynthArgs),
    /// Train one seed and write its checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint with and without neighbor rectification.
    Eval(EvalArgs),
    /// Sweep one hyperparameter over a grid of values.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-hash the inputs recorded in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10, value_parser = at_least_two)]
    pub classes: usize,
    #[arg(long, default_value_t = 64, value_parser = at_least_two)]
    pub dim: usize,
    /// Standard deviation of the per-sample noise around each class mean.
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true, value_parser = non_negative)]
    pub spread: f64,
    /// Length of the offset between a class mean and its text prototype.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true, value_parser = non_negative)]
    pub shift: f64,
    #[arg(long, default_value_t = 32)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

/// Protocol settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "fewshot")]
    pub mode: Mode,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Consistency weight; defaults to 1 for fewshot and 8 for base2new.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = cpr::nnr::DEFAULT_ALPHA, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = cpr::nnr::DEFAULT_K)]
    pub k_neighbors: usize,
    #[arg(long, default_value = "dual")]
    pub variant: Variant,
    /// Use the text embeddings as fixed prototypes instead of learning a prompt.
    #[arg(long)]
    pub frozen_w: bool,
    /// Prompt context length; defaults to 16 for fewshot and 4 for base2new.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Anchor embeddings for the consistency loss, overriding the manifest.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long, default_value_t = cpr::trainer::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "fewshot")]
    pub mode: Mode,
    /// Report the rectified prototypes (default).
    #[arg(long, overrides_with = "no_nnr")]
    pub nnr: bool,
    /// Report the prototypes without rectification.
    #[arg(long, overrides_with = "nnr")]
    pub no_nnr: bool,
    #[arg(long, default_value_t = cpr::nnr::DEFAULT_ALPHA, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = cpr::nnr::DEFAULT_K)]
    pub k_neighbors: usize,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub axis: Axis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub grid: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = cpr::eval::DEFAULT_SEEDS)]
    pub seeds: Vec<u64>,
    /// Tabulate the unrectified numbers instead of the rectified ones.
    #[arg(long)]
    pub report_plain: bool,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16, value_parser = at_least_two)]
    pub dim: usize,
    #[arg(long, default_value_t = 5, value_parser = at_least_two)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub context_len: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub samples_per_class: usize,
    /// Noise added to the parameters so the check does not run at the initialization.
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub perturb: f64,
    /// Include neighbor rectification inside the loss.
    #[arg(long)]
    pub nnr_in_loss: bool,
    /// Check this many random coordinates per tensor instead of all of them.
    #[arg(long)]
    pub coords: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the per-tensor report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// A `run.json` written by another command.
    pub manifest: PathBuf,
}

/// A bad flag or setting detected outside clap.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite value >= 0, got {s}"))
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        _ => Err(format!("must be an integer >= 2, got {s}")),
    }
}

/// Resolves relative paths against `--workdir`.
#[derive(Debug, Clone)]
pub struct Workdir(PathBuf);

impl Workdir {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.0.join(p)
        } else {
            p.to_path_buf()
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CprError>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

#[cfg(feature = "parallel")]
fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("CPR_THREADS") else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("CPR_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() -> anyhow::Result<()> {
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let wd = Workdir(cli.workdir);
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &wd),
        Command::Train(a) => commands::train(&a, &wd),
        Command::Eval(a) => commands::eval(&a, &wd),
        Command::Ablate(a) => commands::ablate(&a, &wd),
        Command::Gradcheck(a) => commands::gradcheck(&a, &wd),
        Command::Verify(a) => commands::verify(&a, &wd),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
