//! Command-line driver for the text-to-text recommendation toolkit.
//!
//! Subcommands cover the full experiment lifecycle: dataset ingestion,
//! corpus construction, vocabulary training, pretraining, per-task
//! evaluation, cross-domain transfer, ablation sweeps, and run-directory
//! summaries. Outputs land in run directories named by config hash under
//! the `PROMPTREC_HOME` root (default `./runs`), each with a manifest.

mod args;
mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptrec_core::corpus::SplitTag;
use promptrec_core::eval::ablate::AblationKind;
use promptrec_core::eval::EvalSetting;
use promptrec_core::prompts::PromptId;

use args::{parse_split_tag, DatasetArg, PipelineArgs};

#[derive(Parser)]
#[command(
    name = "promptrec",
    about = "Prompt-based text-to-text recommendation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load a dataset and persist it with its statistics
    Ingest {
        /// synth[:users=..,items=..,...] or a dataset JSON path
        #[arg(long)]
        dataset: DatasetArg,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Output directory (default: run dir under the working root)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Split a dataset and render the pretraining pair stream
    BuildCorpus {
        #[arg(long)]
        dataset: DatasetArg,

        /// Prompt registry TOML (default: built-in registry)
        #[arg(long)]
        registry: Option<PathBuf>,

        #[command(flatten)]
        pipeline: PipelineArgs,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train the subword vocabulary on the pretraining pair stream
    TrainVocab {
        #[arg(long)]
        dataset: DatasetArg,

        #[arg(long)]
        registry: Option<PathBuf>,

        #[command(flatten)]
        pipeline: PipelineArgs,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Run the full pipeline: corpus, vocabulary, model training
    Pretrain {
        #[arg(long)]
        dataset: DatasetArg,

        #[arg(long)]
        registry: Option<PathBuf>,

        #[command(flatten)]
        pipeline: PipelineArgs,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Score a pretrained checkpoint on one task setting
    Evaluate {
        /// Pretrain run directory (or a checkpoint file inside one)
        #[arg(long)]
        checkpoint: PathBuf,

        /// Evaluate on different data than the checkpoint's (optional)
        #[arg(long)]
        dataset: Option<DatasetArg>,

        /// Template ids to score, e.g. --prompt 2-1,2-13
        #[arg(long = "prompt", value_delimiter = ',', required = true)]
        prompts: Vec<PromptId>,

        /// all-item | cand100 | scalar | text
        #[arg(long)]
        setting: EvalSetting,

        /// Which data split to evaluate: train | valid | test
        #[arg(long, default_value = "test", value_parser = parse_split_tag)]
        split: SplitTag,

        /// Beam width for ranking settings
        #[arg(long, default_value_t = 20)]
        beam: usize,

        /// Candidate-set size for the cand100 setting
        #[arg(long, default_value_t = 100)]
        candidates: usize,

        /// Decode budget override for scalar/text settings
        #[arg(long)]
        max_new_tokens: Option<usize>,

        /// Sampling seed (default: the checkpoint's pipeline seed)
        #[arg(long)]
        seed: Option<u64>,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Zero-shot cross-domain evaluation of a pretrained checkpoint
    Transfer {
        /// Pretrain run directory holding the source-domain model
        #[arg(long)]
        checkpoint: PathBuf,

        /// Target-domain dataset (synth spec or JSON path)
        #[arg(long)]
        dataset: DatasetArg,

        #[arg(long, default_value_t = 20)]
        beam: usize,

        #[arg(long)]
        max_new_tokens: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train and compare model variants along one axis
    Ablate {
        /// task_scaling | prompt_scaling | personalization | model_size
        #[arg(long)]
        kind: AblationKind,

        /// Synthetic dataset spec shared by every variant
        #[arg(long, default_value = "synth")]
        dataset: DatasetArg,

        #[command(flatten)]
        pipeline: PipelineArgs,

        #[arg(long, default_value_t = 20)]
        beam: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Summarize a run directory's manifest and reports
    Report {
        /// The run directory to summarize
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest { dataset, seed, out } => {
            commands::ingest(dataset, *seed, out.as_deref())
        }
        Command::BuildCorpus {
            dataset,
            registry,
            pipeline,
            seed,
            out,
        } => commands::build_corpus(dataset, registry.as_deref(), pipeline, *seed, out.as_deref()),
        Command::TrainVocab {
            dataset,
            registry,
            pipeline,
            seed,
            out,
        } => commands::train_vocab(dataset, registry.as_deref(), pipeline, *seed, out.as_deref()),
        Command::Pretrain {
            dataset,
            registry,
            pipeline,
            seed,
            out,
        } => commands::pretrain(dataset, registry.as_deref(), pipeline, *seed, out.as_deref()),
        Command::Evaluate {
            checkpoint,
            dataset,
            prompts,
            setting,
            split,
            beam,
            candidates,
            max_new_tokens,
            seed,
            out,
        } => commands::evaluate(
            checkpoint,
            dataset.as_ref(),
            prompts,
            *setting,
            *split,
            *beam,
            *candidates,
            *max_new_tokens,
            *seed,
            out.as_deref(),
        ),
        Command::Transfer {
            checkpoint,
            dataset,
            beam,
            max_new_tokens,
            seed,
            out,
        } => commands::transfer(
            checkpoint,
            dataset,
            *beam,
            *max_new_tokens,
            *seed,
            out.as_deref(),
        ),
        Command::Ablate {
            kind,
            dataset,
            pipeline,
            beam,
            seed,
            out,
        } => commands::ablate(*kind, dataset, pipeline, *beam, *seed, out.as_deref()),
        Command::Report { run_dir } => commands::report(run_dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
