use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use mctm::learning::TrainConfig;
use serde::Serialize;

fn defaults() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Debug, Parser)]
#[command(
    name = "mctm",
    version,
    about = "Phenotype discovery with a multi-type correlated topic model",
    args_override_self = true
)]
pub struct Cli {
    /// Worker threads for per-record inference (default: all cores)
    #[arg(long, global = true, env = "MCTM_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    /// JSON object whose keys mirror this command's long flags; flags given
    /// on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a corpus with variational EM
    Train(TrainArgs),
    /// Report phenotype definitions and the relatedness graph of a model
    Phenotypes(PhenotypesArgs),
    /// Summarize time-segmented records against a trained model
    Summarize(SummarizeArgs),
    /// Train on synthetic data and score recovery of the planted phenotypes
    Eval(EvalArgs),
    /// Histogram of how many phenotypes explain each training record
    Coverage(CoverageArgs),
    /// Write a synthetic corpus and its planted truth
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Phenotypes(_) => "phenotypes",
            Command::Summarize(_) => "summarize",
            Command::Eval(_) => "eval",
            Command::Coverage(_) => "coverage",
            Command::Synth(_) => "synth",
        }
    }
}

/// Recovery runs default to several initializations, since a single EM run
/// can settle in a local optimum that merges two planted phenotypes.
pub const EVAL_RESTARTS: usize = 4;

pub const SUBCOMMANDS: [&str; 6] = ["train", "phenotypes", "summarize", "eval", "coverage", "synth"];

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmOptions {
    /// Maximum EM iterations
    #[arg(long, default_value_t = defaults().max_em_iters)]
    pub max_em_iters: usize,
    /// Relative change of the corpus objective that counts as converged
    #[arg(long, default_value_t = defaults().em_tol)]
    pub em_tol: f64,
    /// Pseudo-count added to every topic-token cell in the M-step
    #[arg(long, default_value_t = defaults().beta_smoothing)]
    pub beta_smoothing: f64,
    /// Scale of the random perturbation of the initial topics
    #[arg(long, default_value_t = defaults().noise_scale)]
    pub noise_scale: f64,
    /// Per-record convergence tolerance on the log proportions
    #[arg(long, default_value_t = defaults().doc_tol)]
    pub doc_tol: f64,
    /// Per-record coordinate-ascent iteration cap
    #[arg(long, default_value_t = defaults().doc_max_outer)]
    pub doc_max_outer: usize,
    /// Keep the prior mean and covariance at their initial values
    #[arg(long)]
    pub fixed_prior: bool,
}

impl EmOptions {
    pub fn train_config(&self, k: usize, seed: u64, restarts: usize) -> TrainConfig {
        TrainConfig {
            k,
            seed,
            restarts,
            max_em_iters: self.max_em_iters,
            em_tol: self.em_tol,
            beta_smoothing: self.beta_smoothing,
            noise_scale: self.noise_scale,
            doc_tol: self.doc_tol,
            doc_max_outer: self.doc_max_outer,
            update_prior: !self.fixed_prior,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Corpus directory holding vocab.json and records.jsonl
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of phenotypes (at least 2)
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// Independent initializations; the best final objective wins
    #[arg(long, default_value_t = defaults().restarts)]
    pub restarts: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub em: EmOptions,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationSourceArg {
    /// Learned prior covariance
    Prior,
    /// Correlation of per-record proportions
    Empirical,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhenotypesArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Tokens listed per phenotype and data type
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    /// Data type whose most probable token labels each phenotype
    /// (default: the first data type)
    #[arg(long)]
    pub label_type: Option<String>,
    /// Edges join phenotypes whose correlation exceeds this value
    #[arg(long, default_value_t = mctm::phenotype::DEFAULT_CORRELATION_THRESHOLD)]
    pub corr_threshold: f64,
    #[arg(long, value_enum, default_value = "prior")]
    pub correlation_source: CorrelationSourceArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL records, one line per (record, time bin) segment in time order
    #[arg(long)]
    pub record_file: PathBuf,
    /// Vocabulary file for the records (default: the model's own vocabularies)
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Phenotypes tracked per record, chosen from the final bin
    #[arg(long, default_value_t = mctm::summarize::DEFAULT_TOP_N)]
    pub top_n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["preset", "scenario", "truth"])))]
pub struct EvalArgs {
    /// Named synthetic scenario: separable, correlated-blocks, overlapping
    #[arg(long)]
    pub preset: Option<String>,
    /// Scenario JSON file
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Model file holding the planted parameters (with --corpus)
    #[arg(long, requires = "corpus")]
    pub truth: Option<PathBuf>,
    /// Corpus directory sampled from --truth
    #[arg(long, requires = "truth")]
    pub corpus: Option<PathBuf>,
    /// Phenotypes to learn (default: the planted number)
    #[arg(long)]
    pub k: Option<usize>,
    /// Training seed
    #[arg(long)]
    pub seed: u64,
    /// Independent initializations; the best final objective wins
    #[arg(long, default_value_t = EVAL_RESTARTS)]
    pub restarts: usize,
    /// Largest acceptable mean total-variation distance
    #[arg(long, default_value_t = 0.1)]
    pub tv_threshold: f64,
    /// Planted correlations above this magnitude are reported
    #[arg(long, default_value_t = mctm::phenotype::DEFAULT_CORRELATION_THRESHOLD)]
    pub corr_threshold: f64,
    #[command(flatten)]
    pub em: EmOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Share of each record's proportion mass to explain
    #[arg(long, default_value_t = mctm::summarize::DEFAULT_COVERAGE_MASS)]
    pub mass: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["preset", "scenario"])))]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Override the scenario's sampling seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the scenario's record count
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}
