mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::CliError;

/// Neural passage re-ranking experiments: BM25 candidates, KNRM-family and
/// MatchPyramid rankers, threshold and frequency analysis.
#[derive(Debug, Parser)]
#[command(name = "rerank-lab", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.batch_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the inverted index of the collection.
    BuildIndex,
    /// Build the Voc-n vocabulary and print its size/coverage/OOV report.
    BuildVocab,
    /// BM25 top-K retrieval: a TREC run and a candidates file.
    Retrieve {
        /// Candidates per query (default: retrieval.depth).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the configured model on the triples file.
    Train,
    /// Re-rank the top-T candidates with a trained model.
    Rerank {
        /// Defaults to train/best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to eval.threshold.
        #[arg(long, short = 't')]
        threshold: Option<usize>,
    },
    /// MRR@k and Recall@k of a run, with a per-query TSV.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate every threshold in eval.threshold_min..=threshold_max.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// MRR over queries bucketed by the collection frequency of their rarest term.
    AnalyzeFrequency {
        #[arg(required = true)]
        per_query: Vec<PathBuf>,
    },
    /// Paired two-sided t-test of two per-query TSVs.
    Compare { a: PathBuf, b: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildIndex => "build-index",
            Command::BuildVocab => "build-vocab",
            Command::Retrieve { .. } => "retrieve",
            Command::Train => "train",
            Command::Rerank { .. } => "rerank",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::AnalyzeFrequency { .. } => "analyze-frequency",
            Command::Compare { .. } => "compare",
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RERANK_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("RERANK_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Context::new(config, cli.command.name());
    ctx.print_header();
    match &cli.command {
        Command::BuildIndex => commands::build_index(&ctx),
        Command::BuildVocab => commands::build_vocab(&ctx),
        Command::Retrieve { k } => commands::retrieve_cmd(&ctx, *k),
        Command::Train => commands::train_cmd(&ctx),
        Command::Rerank { checkpoint, threshold } => commands::rerank_cmd(&ctx, checkpoint.as_deref(), *threshold),
        Command::Evaluate { run } => commands::evaluate_cmd(&ctx, run),
        Command::Sweep { checkpoint } => commands::sweep_cmd(&ctx, checkpoint.as_deref()),
        Command::AnalyzeFrequency { per_query } => commands::analyze_frequency(&ctx, per_query),
        Command::Compare { a, b } => commands::compare(&ctx, a, b),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
