//! `qraug`: corpus generation through end-to-end augmentation experiments.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use qraug::augmenter::DecodeMode;
use qraug::rewards::RewardKind;

#[derive(Parser)]
#[command(name = "qraug", version, about = "Reward-guided data augmentation for query rewriting")]
struct Cli {
    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML config file; `QRAUG_SECTION__KEY` variables override it and flags override both.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (request, rewrite) corpus as JSON lines.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of pairs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Pronunciation lexicon (TSV); the bundled one by default.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Build a vocabulary file from a pairs file.
    BuildVocab {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        min_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the rewrite-to-request model with teacher forcing.
    TrainMle {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Pairs for dev-loss evaluation.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Vocabulary file; built from the data when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// JSON-lines training metrics.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train a contrastive mean-pool encoder (reward or retrieval).
    TrainEncoder {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a trained model with self-critical policy gradients.
    TrainScst {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        reward: Option<RewardKind>,
        /// Phonetic weight of the combined reward.
        #[arg(long)]
        alpha: Option<f64>,
        /// Pairs for model selection; the last 5% of the data when absent.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Semantic encoder checkpoint, required by semantic and combined rewards.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode synthetic requests for golden rewrites.
    Augment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// One rewrite per line, or JSON-lines pairs whose rewrites are used.
        #[arg(long)]
        rewrites: PathBuf,
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        n_per_input: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        beam_width: Option<usize>,
        /// Attach r_d scores with this encoder.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Score pairs with the phonetic, semantic and combined rewards.
    ScoreRewards {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Phonetic weight of the combined reward.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge two pair files, dropping exact duplicates.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision at K of a retrieval encoder on a test set.
    EvalRetrieval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        encoder: PathBuf,
        /// Rewrites to index (lines or pairs), or a saved index directory.
        #[arg(long)]
        index_data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated cutoffs.
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the built index to this directory.
        #[arg(long)]
        save_index: Option<PathBuf>,
    },
    /// Full pipeline: corpus, MLE, SCST, augmentation, merge, two retrievers, P@K comparison.
    RunExperiment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip augmentation; both arms then train on the original pairs.
        #[arg(long)]
        no_augmentation: bool,
        #[arg(long)]
        report: PathBuf,
        /// Also write the synthetic pairs.
        #[arg(long)]
        synthetic_out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    commands::run(cli.command)
}
