mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hardneg::pipeline::NegativeMode;
use tracing_subscriber::EnvFilter;

/// Hard negative query generation, dataset assembly and rerank evaluation.
#[derive(Debug, Parser)]
#[command(name = "hardneg", version)]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Processes at most this many input records.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// Renders and plans requests without contacting any endpoint.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Answers model calls from a scripted mock instead of the network.
    #[arg(long, global = true, value_name = "PATH")]
    pub mock_script: Option<PathBuf>,
    /// Tolerates missing reranker scores instead of failing.
    #[arg(long, global = true)]
    pub allow_missing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates and verifies one positive query per page.
    GenPositives {
        /// Page corpus JSONL.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates and verifies hard negatives, writing triplets and a manifest.
    GenNegatives {
        #[arg(long)]
        corpus: PathBuf,
        /// Kept positives JSONL from gen-positives.
        #[arg(long)]
        positives: PathBuf,
        #[arg(long, default_value = "generic")]
        mode: NegativeMode,
        #[arg(long)]
        out: PathBuf,
        /// Dataset name recorded in the manifest.
        #[arg(long)]
        name: Option<String>,
    },
    /// Rephrases a deterministic fraction of positives.
    Rephrase {
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Builds a dataset mix from a recipe.
    BuildDataset {
        /// Recipe (TOML).
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Page corpus used to fill in image paths.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also writes batches.jsonl.
        #[arg(long)]
        batches: bool,
    },
    /// Packs dataset examples into training batches.
    ExportBatches {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch_groups: Option<usize>,
    },
    /// Reranks a retrieval run and reports metric deltas.
    RerankEval {
        /// TREC run: `qid Q0 pageid rank score tag`.
        #[arg(long)]
        run: PathBuf,
        /// TREC qrels: `qid 0 pageid rel`.
        #[arg(long)]
        qrels: PathBuf,
        /// Score file `qid pageid score`; scores come from the rerank
        /// endpoint when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Query texts JSONL with `query_id` and `text`.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Checks record files and manifests against their invariants.
    Validate {
        #[arg(long)]
        pages: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        batches: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
