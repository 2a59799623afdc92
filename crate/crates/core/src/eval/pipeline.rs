//! End-to-end pretraining pipeline: dataset → splits → rendered pair
//! streams → vocabulary → encoded examples → trained model.
//!
//! This is the shared backbone behind the `pretrain` command, the ablation
//! runner, and the end-to-end tests. Variant knobs (train on a subset of
//! task families, cap the number of prompts per family, switch identifiers
//! to one-token-per-id mode) are part of the config so ablations differ
//! from the default run in exactly one declared way.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{verify_no_prompt_leakage, EvalError};
use crate::corpus::pairs::{atomic_inventory, build_training_pairs};
use crate::corpus::{
    CorpusBundle, Dataset, PairBuildConfig, SplitRatios, SplitTag, TrainingPair,
};
use crate::model::{Example, Model, ModelConfig};
use crate::prompts::{Family, PromptId, Registry, RegistrySplit, SplitPolicy};
use crate::tokenizer::Vocab;
use crate::train::{train, CheckpointSink, TrainConfig, TrainReport};

/// Everything a pretraining run needs beyond the dataset and registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ratios: SplitRatios,
    pub pair_cfg: PairBuildConfig,
    pub policy: SplitPolicy,
    /// Target vocabulary size for subword training.
    pub vocab_size: usize,
    /// Give every user and item id a dedicated single token.
    pub atomic_ids: bool,
    /// Model shape; `vocab_size` and `max_whole_words` are overwritten to
    /// match the trained vocabulary and sequence budget.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train only on these task families (all five when `None`).
    pub families: Option<BTreeSet<Family>>,
    /// Keep only the lowest-index N pretraining prompts per family.
    pub max_prompts_per_family: Option<usize>,
}

impl PipelineConfig {
    /// Desk-scale defaults around the 2-layer toy model.
    pub fn toy() -> PipelineConfig {
        PipelineConfig {
            ratios: SplitRatios::default(),
            pair_cfg: PairBuildConfig::default(),
            policy: SplitPolicy::LastPerFamily,
            vocab_size: 512,
            atomic_ids: false,
            model: ModelConfig::toy(0),
            train: TrainConfig::default(),
            families: None,
            max_prompts_per_family: None,
        }
    }
}

/// Pair-stream accounting carried into reports and manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSummary {
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub skipped_bindings: usize,
    pub short_candidate_pools: usize,
}

/// The trained artifacts of one pipeline run.
pub struct PipelineOutput {
    pub bundle: CorpusBundle,
    pub split: RegistrySplit,
    pub vocab: Vocab,
    pub model: Model,
    pub train_report: TrainReport,
    pub pair_summary: PairSummary,
}

/// Prompt ids allowed into the training stream for one config.
fn allowed_prompts(
    registry: &Registry,
    split: &RegistrySplit,
    cfg: &PipelineConfig,
) -> BTreeSet<PromptId> {
    let mut allowed = BTreeSet::new();
    for family in Family::ALL {
        if let Some(families) = &cfg.families {
            if !families.contains(&family) {
                continue;
            }
        }
        let mut ids: Vec<PromptId> = registry
            .family_templates(family)
            .iter()
            .map(|t| t.id)
            .filter(|&id| split.is_pretrain(id))
            .collect();
        ids.sort();
        if let Some(cap) = cfg.max_prompts_per_family {
            ids.truncate(cap);
        }
        allowed.extend(ids);
    }
    allowed
}

/// Encode rendered pairs into model examples.
pub fn encode_pairs(
    vocab: &Vocab,
    pairs: &[TrainingPair],
    max_len: usize,
) -> Result<Vec<Example>, EvalError> {
    pairs
        .iter()
        .map(|pair| {
            let source = vocab.encode(&pair.input, max_len)?;
            let target = vocab.encode(&pair.target, max_len)?;
            Ok(Example {
                source,
                target_ids: target.token_ids,
            })
        })
        .collect()
}

/// The filtered pretraining pair stream plus its provenance.
pub struct PairStage {
    pub bundle: CorpusBundle,
    pub split: RegistrySplit,
    pub pairs: Vec<TrainingPair>,
    pub skipped_bindings: usize,
    pub short_candidate_pools: usize,
}

/// Prepare corpus splits and render the pair stream pretraining will see:
/// held-out prompts excluded, family and per-family prompt caps applied,
/// leakage verified.
pub fn build_pipeline_pairs(
    dataset: Dataset,
    registry: &Registry,
    cfg: &PipelineConfig,
) -> Result<PairStage, EvalError> {
    let bundle = CorpusBundle::prepare(dataset, cfg.ratios, cfg.pair_cfg.seed)?;
    let split = registry.split_for_pretrain(&cfg.policy)?;
    let report = build_training_pairs(&bundle, registry, &split, &cfg.pair_cfg)?;

    let allowed = allowed_prompts(registry, &split, cfg);
    let pairs: Vec<TrainingPair> = report
        .pairs
        .into_iter()
        .filter(|p| allowed.contains(&p.prompt_id))
        .collect();
    verify_no_prompt_leakage(&pairs, &split)?;
    if pairs.is_empty() {
        return Err(EvalError::NoQueries {
            what: "training pairs after filtering".to_string(),
        });
    }
    Ok(PairStage {
        bundle,
        split,
        pairs,
        skipped_bindings: report.skipped_bindings,
        short_candidate_pools: report.short_candidate_pools,
    })
}

/// Train the subword vocabulary exactly as pretraining does, including
/// identifier reservation and the optional dedicated-token extension.
pub fn train_pipeline_vocab(
    stage: &PairStage,
    cfg: &PipelineConfig,
) -> Result<Vocab, EvalError> {
    // vocabulary learned from the rendered text the model will see
    let texts: Vec<&str> = stage
        .pairs
        .iter()
        .flat_map(|p| [p.input.as_str(), p.target.as_str()])
        .collect();
    // Identifier words are reserved whether or not they get dedicated
    // tokens: subword training never absorbs a whole id. That keeps ids as
    // genuine subword sequences in the default mode and makes the atomic
    // mode grow the same base vocabulary by exactly the inventory size, so
    // the two modes differ only in identifier handling.
    let (users, items) = atomic_inventory(&stage.bundle);
    let reserved: Vec<&str> = users
        .iter()
        .chain(items.iter())
        .map(String::as_str)
        .collect();
    let (mut vocab, _stats) =
        Vocab::train_with_reserved(texts, cfg.vocab_size, &reserved)?;
    if cfg.atomic_ids {
        vocab.extend_with_atomic_ids(&users)?;
        vocab.extend_with_atomic_ids(&items)?;
    }
    Ok(vocab)
}

/// Run the full pretraining pipeline. When a checkpoint sink is given,
/// `latest.json` / `best.json` land in its directory.
pub fn run_pipeline(
    dataset: Dataset,
    registry: &Registry,
    cfg: &PipelineConfig,
    sink_dir: Option<&std::path::Path>,
) -> Result<PipelineOutput, EvalError> {
    let stage = build_pipeline_pairs(dataset, registry, cfg)?;
    let vocab = train_pipeline_vocab(&stage, cfg)?;
    let PairStage {
        bundle,
        split,
        pairs,
        skipped_bindings,
        short_candidate_pools,
    } = stage;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    model_cfg.max_whole_words = model_cfg.max_len;
    let mut model = Model::new(model_cfg)?;

    let train_pairs: Vec<TrainingPair> = pairs
        .iter()
        .filter(|p| p.split == SplitTag::Train)
        .cloned()
        .collect();
    let valid_pairs: Vec<TrainingPair> = pairs
        .iter()
        .filter(|p| p.split == SplitTag::Valid)
        .cloned()
        .collect();
    let train_examples = encode_pairs(&vocab, &train_pairs, model.config.max_len)?;
    let mut valid_examples = encode_pairs(&vocab, &valid_pairs, model.config.max_len)?;
    if valid_examples.is_empty() {
        // tiny corpora can sample away the whole valid stream; track the
        // training head instead so the loss curve stays defined
        valid_examples = train_examples.iter().take(8).cloned().collect();
    }

    let vocab_hash = vocab.content_hash();
    let sink = sink_dir.map(|dir| CheckpointSink {
        dir,
        vocab_hash: &vocab_hash,
    });
    let train_report = train(
        &mut model,
        &train_examples,
        &valid_examples,
        &cfg.train,
        sink.as_ref(),
    )?;

    Ok(PipelineOutput {
        bundle,
        split,
        vocab,
        model,
        train_report,
        pair_summary: PairSummary {
            train_pairs: train_examples.len(),
            valid_pairs: valid_examples.len(),
            skipped_bindings,
            short_candidate_pools,
        },
    })
}
