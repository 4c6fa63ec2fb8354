mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use policy_align::loss::Objective;

use crate::error::CliError;

/// Rewrite an SFT corpus into a policy-aligned mixture, and inspect it.
#[derive(Debug, Parser)]
#[command(name = "policy-align", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop overlong problems and write the filtered corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Run the three-stage rewrite and write the mixture dataset.
    Rewrite {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Builtin retell template name or template file.
        #[arg(long)]
        template: Option<String>,
        /// Candidates per stage.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Stop after this many newly finished problems; rerun to resume.
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Check one response against a gold answer, or a whole TSV corpus.
    Verify {
        #[arg(long, requires = "gold", conflicts_with = "corpus")]
        response_file: Option<PathBuf>,
        #[arg(long)]
        gold: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Stage-count table of a mixture dataset.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Policy-gap report: average logprobs per subset and source.
    Report {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        aggregation: Option<AggregationArg>,
    },
    /// Per-token weights for an external trainer.
    ExportWeights {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Score records from `report`; the responses are scored live otherwise.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Finite-difference check of the loss gradients on random micro-models.
    Gradcheck {
        #[arg(long, value_enum, default_value = "dft")]
        objective: ObjectiveArg,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = policy_align::loss::gradcheck::DEFAULT_EPSILON)]
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Seq,
    Token,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Ce,
    Dft,
    Is,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ce => Objective::Ce,
            ObjectiveArg::Dft => Objective::Dft,
            ObjectiveArg::Is => Objective::Is,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            report_error(&err);
            ExitCode::from(err.category.exit_code())
        }
    }
}

fn report_error(err: &CliError) {
    eprintln!("error: {err}");
}
