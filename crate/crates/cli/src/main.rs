mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ordstab::stability::{RankCriterion, ResampleMode};
use ordstab::{Error, RegularizerKind, Variant};

#[derive(Parser, Debug)]
#[command(name = "ordstab", version, about = "Stabilized sparse ordinal regression on event streams")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter-bank features from an event log and a label file.
    Extract(ExtractArgs),
    /// Feature network and regularizer matrix from a feature manifest.
    Network(NetworkArgs),
    /// Fit one model on an extracted corpus.
    Train(TrainArgs),
    /// Resample, refit and report selection stability.
    Stability(StabilityArgs),
    /// K-fold cross-validation grouped by patient.
    Cv(CvArgs),
    /// Class probabilities from a model file.
    Predict(PredictArgs),
    /// Synthetic cohort with planted weights.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Extraction config (JSON); defaults to the five-segment uniform bank.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of classes; defaults to the largest label.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct NetworkArgs {
    /// Feature manifest written by `extract`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "laplacian")]
    pub regularizer: RegularizerKind,
    #[arg(long, default_value_t = ordstab::network::DEFAULT_PREFIX_LEN)]
    pub prefix_len: usize,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run config (JSON): training fields plus variant, regularizer, min_occurrences.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub regularizer: Option<RegularizerKind>,
    /// Drop codes seen fewer times in the training rows.
    #[arg(long)]
    pub min_occurrences: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Edge list written by `network`; built from the kept features otherwise.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Also fit every alpha of a grid; without values, the standard seven.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Resamples per setting.
    #[arg(long, default_value_t = 30)]
    pub b: usize,
    #[arg(long, default_value = "subsample")]
    pub mode: ResampleMode,
    #[arg(long, default_value = "snr")]
    pub criterion: RankCriterion,
    /// Resample within each training split of K folds and pool the fits.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV, or a directory holding `dataset.csv`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator spec (JSON); `--seed` overrides its seed.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

fn fail(category: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": category, "message": message });
    eprintln!("{line}");
    ExitCode::from(if category == "argument" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("argument", e.to_string().trim_end());
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("argument", &e.to_string());
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.category(), &e.to_string()),
    }
}

pub fn argument(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
