//! The `crylmu` command line: one binary, one subcommand per workflow step.
//!
//! Exit codes: 0 success, 1 other failure, 2 partial success, 3 split or
//! leakage violation, 4 calibration or fusion configuration error,
//! 5 unusable evaluation input, 6 case-study mismatch.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, SynthSpec};
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_SPLIT: i32 = 3;
pub const EXIT_CALIBRATION: i32 = 4;
pub const EXIT_EVAL_INPUT: i32 = 5;
pub const EXIT_CASE_STUDY: i32 = 6;

/// Every module configuration in one file. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub fusion: FusionConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> Result<String> {
        crate::util::config_hash(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "crylmu", version, about = "Infant cry classification and calibrated cross-corpus fusion")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cry-like corpus with a manifest.
    Synth(SynthArgs),
    /// Build a manifest from a directory of WAV files.
    Manifest(ManifestArgs),
    /// Assign leakage-safe train/val/test splits by group.
    Split(SplitArgs),
    /// Extract fused feature tensors for every manifest record.
    Extract(ExtractArgs),
    /// Train a CNN + sequence-cell classifier.
    Train(TrainArgs),
    /// Fit per-model temperatures on validation data.
    Calibrate(CalibrateArgs),
    /// Fuse calibrated posteriors over the union label space.
    Fuse(FuseArgs),
    /// Score predictions.
    Eval(EvalArgs),
    /// Run the bundled fusion case studies.
    Casestudies(CaseArgs),
    /// Summarise a checkpoint and recurrent parameter budgets.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    #[arg(long)]
    pub clip_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "baby2020")]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Manifest file, or a directory to scan first.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest; defaults to overwriting the input file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated train,val,test fractions.
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_stratify: bool,
    /// Naming convention used when `--manifest` is a directory.
    #[arg(long, default_value = "baby2020")]
    pub dataset: String,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Base directory for relative audio paths.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature subset, e.g. `mfcc,stft`.
    #[arg(long)]
    pub features: Option<String>,
    /// Where to write the manifest with feature paths; defaults to `<out>/manifest.jsonl`.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// lmu, lstm or none.
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated conv widths, e.g. `16,8,4`.
    #[arg(long)]
    pub filters: Option<String>,
    /// Sequence-cell hidden size.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Feature subset seen by the model.
    #[arg(long)]
    pub features: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Checkpoint directory; repeat for several models.
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    /// Validation manifest per checkpoint, in the same order.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Precomputed validation logit tables (`sample_id,label,<classes>`).
    #[arg(long = "logits")]
    pub logits: Vec<PathBuf>,
    /// Split whose records are used for fitting.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to fuse; `all` keeps every record.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Logit tables replacing each member's source, in member order.
    #[arg(long = "logits")]
    pub logits: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Ignore fitted temperatures.
    #[arg(long)]
    pub no_calibration: bool,
    /// Run the bundled case-study fixture instead of a manifest.
    #[arg(long)]
    pub cases: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction CSV; repeat once per seed for a sweep.
    #[arg(long = "preds", required = true)]
    pub preds: Vec<PathBuf>,
    /// Manifest supplying true labels by sample id.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds labelling each prediction file, e.g. `0,1,2,3,4`.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub no_calibration: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

/// Exit code for a failed command.
fn exit_code(command: &Command, err: &anyhow::Error) -> i32 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_OTHER;
    };
    match (command, e) {
        (_, Error::Split(_) | Error::Leakage(_)) => EXIT_SPLIT,
        (_, Error::CaseStudyFailure(_)) => EXIT_CASE_STUDY,
        (_, Error::Calibration(_)) => EXIT_CALIBRATION,
        (Command::Calibrate(_) | Command::Fuse(_), Error::Config(_) | Error::Label(_)) => EXIT_CALIBRATION,
        (Command::Eval(_), Error::Data(_) | Error::Label(_) | Error::Parse { .. } | Error::Csv(_)) => EXIT_EVAL_INPUT,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_OTHER } else { EXIT_OK };
        }
    };
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&cli.command, &err)
        }
    }
}
