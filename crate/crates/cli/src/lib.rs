//! `ohd`: build counterfactual hallucination benchmarks, fine-tune the toy
//! encoder, evaluate, compute CHAIR/POPE and render reports.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O error,
//! 3 generation, LLM or numeric failure. Diagnostics go to stderr; data only
//! goes to files.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ohd_core::Error;

mod commands;
pub mod config;
pub mod http;
mod output;

pub use config::{EncoderMode, LlmMode};

#[derive(Debug, Parser)]
#[command(name = "ohd", version, about = "Object-hallucination benchmarks and hallucination-aware fine-tuning")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML config file. Flags override it; it overrides built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work in build and eval.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic annotation corpus.
    Synth(SynthArgs),
    /// Generate a 27-negative benchmark from annotations.
    Build(BuildArgs),
    /// Fine-tune the toy encoder on a benchmark.
    Train(TrainArgs),
    /// Train on growing fractions of a benchmark and score each on a dev set.
    Sweep(SweepArgs),
    /// Caption-selection accuracy of an encoder on a benchmark.
    Eval(EvalArgs),
    /// Standalone caption and selection metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Combine eval or sweep outputs into a table, CSV or plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of images with only one or two objects.
    #[arg(long, default_value_t = 0.0)]
    pub sparse_fraction: f64,
    #[arg(long, default_value = "img")]
    pub id_prefix: String,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub llm: Option<LlmMode>,
    /// Benchmark name; defaults to the annotation file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Which caption of each record becomes the positive.
    #[arg(long, default_value_t = 0)]
    pub caption_index: usize,
    /// Drop images whose generation fails instead of aborting.
    #[arg(long)]
    pub skip_failures: bool,
    /// Fail instead of falling back to the template grammar.
    #[arg(long)]
    pub no_fallback: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct LossFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Enhanced negatives per image per step: a count or "all".
    #[arg(long)]
    pub negatives: Option<String>,
    /// How hinge terms are aggregated: mean, sum or max.
    #[arg(long)]
    pub margin: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub freeze_logit_scale: bool,
    /// Hash buckets of a freshly initialized toy encoder.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Embedding width of a freshly initialized toy encoder.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Annotation records; defaults to the benchmark's source corpus.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a random init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Benchmark scored after every epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Loss log; defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5,1")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Series name in plot data.
    #[arg(long, default_value = "toy")]
    pub label: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalEncoder {
    Toy,
    /// Scores precomputed by an external model (`--scores`).
    Adapter,
    /// Uniform random scores, the chance baseline.
    Random,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long, value_enum)]
    pub encoder: Option<EvalEncoder>,
    /// Toy checkpoint.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// JSONL `{image_id, scores}` for the adapter encoder.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Report file; defaults to `<benchmark>.eval.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in reports.
    #[arg(long)]
    pub model: Option<String>,
    /// Column label in reports; defaults to the benchmark name.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// CHAIR_S, CHAIR_I and Cover of generated captions.
    Chair(ChairArgs),
    /// POPE accuracy, precision, recall, F1 and yes-ratio.
    Pope(PopeArgs),
    /// Build balanced POPE yes/no questions from annotations.
    PopeQuestions(PopeQuestionsArgs),
    /// Selection accuracy from precomputed candidate scores.
    Select(SelectArgs),
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    /// `image_id<TAB>caption` lines.
    #[arg(long)]
    pub captions: PathBuf,
    /// Annotation JSONL with the ground-truth objects.
    #[arg(long)]
    pub gold: PathBuf,
    /// `surface<TAB>canonical` lines; the bundled lexicon when absent.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// `coverage`, or `printed` for captions with a hallucination over gold objects.
    #[arg(long, default_value = "coverage")]
    pub cover_formula: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PopeArgs {
    /// Output of `metrics pope-questions`.
    #[arg(long)]
    pub questions: PathBuf,
    /// One yes/no answer per line, in question order.
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PopeQuestionsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub per_image: usize,
    /// random, popular or adversarial.
    #[arg(long, default_value = "popular")]
    pub sampler: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval outputs for table/csv, sweep outputs for plotdata.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// table, csv or plotdata.
    #[arg(long, default_value = "table")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Parse { .. } => 1,
        Error::Io { .. } => 2,
        Error::Generation(_) | Error::Llm(_) | Error::Numeric(_) => 3,
    }
}

/// Parse `argv` (program name first) and run the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ohd: {e}");
            exit_code(&e)
        }
    }
}
