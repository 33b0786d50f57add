//! Command-line driver: every pipeline stage as a subcommand reading and
//! writing JSONL manifests, plus the HTTP service behind the rating UI.

pub mod commands;
pub mod config;
pub mod run;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Failure reported as `{error, detail}` on stderr.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{error}: {detail}")]
pub struct CliError {
    pub error: &'static str,
    pub detail: String,
    #[serde(skip)]
    pub code: i32,
}

impl CliError {
    pub fn config(detail: impl Into<String>) -> Self {
        CliError {
            error: "config",
            detail: detail.into(),
            code: 1,
        }
    }

    pub fn precondition(detail: impl Into<String>) -> Self {
        CliError {
            error: "precondition",
            detail: detail.into(),
            code: 1,
        }
    }

    pub fn runtime(detail: impl Into<String>) -> Self {
        CliError {
            error: "runtime",
            detail: detail.into(),
            code: 1,
        }
    }

    pub fn verify(detail: impl Into<String>) -> Self {
        CliError {
            error: "verify",
            detail: detail.into(),
            code: 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "conflictkit", version, about = "Knowledge-conflict VQA dataset generation and evaluation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run stages on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Skip the command when its previous outputs are intact and the inputs unchanged.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic export and a mock-backend config.
    Synth(SynthArgs),
    /// Turn an exported QA file into original samples.
    Ingest(IngestArgs),
    /// Extract, segment and perturb the objects of original samples.
    Perturb(PerturbArgs),
    /// Judge every pending perturbation record.
    Qc(QcArgs),
    /// Build conflict samples from passing records.
    Assemble(AssembleArgs),
    /// Draw randomized negative counterfactuals.
    Negatives(NegativesArgs),
    /// Ask the subject model every sample.
    Eval(EvalArgs),
    /// Score responses.
    Metrics(MetricsArgs),
    /// Score contextualization and relate it to acknowledgment.
    Context(ContextArgs),
    /// Join perturbation yield with human ratings.
    QualityTable(QualityTableArgs),
    /// Serve the rating API and UI assets.
    ReviewServe(ReviewServeArgs),
    /// Check that the outputs of a run are unchanged.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub size: u32,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL export; relative image paths resolve against its directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML field mapping.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QcArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave parents of conflict samples out of the output.
    #[arg(long)]
    pub no_originals: bool,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_dataset: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sample manifests; repeat to merge.
    #[arg(long, required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model_id: Option<String>,
    /// TOML prompt template; overrides the config.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long, required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Acknowledgment phrases must match on word boundaries.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ContextArgs {
    #[arg(long, required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Also write the smoothed curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct QualityTableArgs {
    #[arg(long, required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReviewServeArgs {
    #[arg(long, required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Append-only rating log; created when missing.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory of built UI assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// A `*.run.json` file.
    #[arg(long)]
    pub run: PathBuf,
}

/// Run a parsed command. Prints a one-line JSON summary on success.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli)
}
