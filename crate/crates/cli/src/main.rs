use std::path::PathBuf;
use std::process::ExitCode;

use cfedit::OrderingStrategy;
use cfedit_cli::commands::{self, MetricsArgs};
use cfedit_cli::config::{Overrides, Project};
use cfedit_cli::CliError;
use clap::{Args, Parser, Subcommand};

/// Concept-level counterfactual edits for image classifiers.
#[derive(Parser)]
#[command(name = "cfedit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Project configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides the file.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Search only the first N target-class images for the closest target.
    #[arg(long)]
    candidate_limit: Option<usize>,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    strategy: Option<OrderingStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classifier queries per image (odd).
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Runs executed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Precomputed importance table (TSV).
    #[arg(long)]
    importance: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration, taxonomy and corpus.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the minimal edit set for one source image.
    Explain {
        #[command(flatten)]
        common: Common,
        image_id: String,
    },
    /// Run the counterfactual loop for every source image.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compute the corpus importance table.
    Importance {
        #[command(flatten)]
        common: Common,
        /// Rows to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Aggregate traces and embedding metrics into report rows.
    Metrics {
        /// Trace files written by `run`.
        #[arg(long, required = true)]
        traces: Vec<PathBuf>,
        /// Embeddings of the reference images.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Embeddings of the generated images.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Kernel bandwidth for CMMD; median heuristic when omitted.
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long, default_value = "classifier")]
        classifier_tag: String,
        /// Write machine-readable rows here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(common: &Common, mut overrides: Overrides) -> Result<Project, CliError> {
    overrides.output_dir = common.output_dir.clone();
    overrides.candidate_limit = common.candidate_limit;
    Project::load(&common.config, &overrides)
}

fn dispatch(command: Command) -> Result<commands::Output, CliError> {
    match command {
        Command::Validate { common } => commands::validate(&load(&common, Overrides::default())?),
        Command::Explain { common, image_id } => commands::explain(&load(&common, Overrides::default())?, &image_id),
        Command::Run { common, flags } => {
            let overrides = Overrides {
                strategy: flags.strategy,
                seed: flags.seed,
                consistency_runs: flags.runs,
                max_steps: flags.max_steps,
                jobs: flags.jobs,
                importance: flags.importance,
                ..Overrides::default()
            };
            commands::run(&load(&common, overrides)?)
        }
        Command::Importance { common, top } => commands::importance(&load(&common, Overrides::default())?, top),
        Command::Metrics { traces, reference, generated, bandwidth, classifier_tag, output } => {
            commands::metrics(&MetricsArgs { traces, reference, generated, bandwidth, classifier_tag, output })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{}", out.text);
            if out.failed {
                eprintln!("error: every run failed");
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
