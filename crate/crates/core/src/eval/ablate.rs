//! Ablation runner: trains a family of model variants on the same
//! synthetic dataset and seed, evaluates each on the same prompts, and
//! lines the reports up side by side.
//!
//! Four comparison axes are built in: which task families the training
//! stream covers, how many prompts per family it uses, whether identifiers
//! are subword sequences or dedicated single tokens, and model width. A
//! failing variant stops the sweep, but every variant finished before the
//! failure is preserved in the report.

use serde::{Deserialize, Serialize};

use super::pipeline::{run_pipeline, PipelineConfig};
use super::{eval_sequential, EvalContext, EvalError, EvalReport, EvalSetting, ExperimentSpec};
use crate::corpus::synth::{generate_synthetic, SynthSpec};
use crate::corpus::Dataset;
use crate::prompts::{Family, PromptId, Registry};

/// The comparison axis to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// One variant per task family, each trained on that family alone.
    TaskScaling,
    /// Variants trained with 1, 2, or all pretraining prompts per family.
    PromptScaling,
    /// Subword identifiers vs one dedicated token per user/item id.
    Personalization,
    /// Base toy model vs a double-width sibling.
    ModelSize,
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationKind::TaskScaling => "task_scaling",
            AblationKind::PromptScaling => "prompt_scaling",
            AblationKind::Personalization => "personalization",
            AblationKind::ModelSize => "model_size",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task_scaling" | "task-scaling" => Ok(AblationKind::TaskScaling),
            "prompt_scaling" | "prompt-scaling" => Ok(AblationKind::PromptScaling),
            "personalization" => Ok(AblationKind::Personalization),
            "model_size" | "model-size" => Ok(AblationKind::ModelSize),
            other => Err(format!(
                "unknown ablation {other:?} (expected task_scaling | prompt_scaling | \
                 personalization | model_size)"
            )),
        }
    }
}

/// Shared base configuration; each variant changes exactly one axis.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub synth: SynthSpec,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub beam: usize,
    /// Sequential prompts every variant is scored on (seen + zero-shot by
    /// default).
    pub eval_prompts: Vec<PromptId>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            synth: SynthSpec::default(),
            seed: 0,
            pipeline: PipelineConfig::toy(),
            beam: 20,
            eval_prompts: vec![
                PromptId::new(Family::Sequential, 1),
                PromptId::new(Family::Sequential, 13),
            ],
        }
    }
}

/// One trained-and-evaluated variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub name: String,
    pub vocab_size: usize,
    pub param_count: usize,
    pub final_valid_loss: Option<f64>,
    pub reports: Vec<EvalReport>,
}

/// The sweep's outcome: finished variants plus the failure that stopped
/// it, if any.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub variants: Vec<VariantOutcome>,
    pub aborted: Option<String>,
}

fn variant_configs(kind: AblationKind, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    match kind {
        AblationKind::TaskScaling => Family::ALL
            .iter()
            .map(|&family| {
                let mut cfg = base.clone();
                cfg.families = Some([family].into_iter().collect());
                (format!("only-{}", family.name()), cfg)
            })
            .collect(),
        AblationKind::PromptScaling => {
            let mut variants = Vec::new();
            for cap in [1usize, 2] {
                let mut cfg = base.clone();
                cfg.max_prompts_per_family = Some(cap);
                variants.push((format!("prompts-per-family-{cap}"), cfg));
            }
            let mut cfg = base.clone();
            cfg.max_prompts_per_family = None;
            variants.push(("prompts-all".to_string(), cfg));
            variants
        }
        AblationKind::Personalization => {
            let subword = base.clone();
            let mut atomic = base.clone();
            atomic.atomic_ids = true;
            vec![
                ("subword-ids".to_string(), subword),
                ("atomic-ids".to_string(), atomic),
            ]
        }
        AblationKind::ModelSize => {
            let small = base.clone();
            let mut wide = base.clone();
            wide.model.d_model *= 2;
            wide.model.d_ff *= 2;
            wide.model.heads *= 2;
            vec![
                ("base-width".to_string(), small),
                ("double-width".to_string(), wide),
            ]
        }
    }
}

/// Train one variant and score it on the shared sequential prompts.
fn run_variant(
    dataset: Dataset,
    registry: &Registry,
    name: &str,
    cfg: &PipelineConfig,
    beam: usize,
    seed: u64,
    eval_prompts: &[PromptId],
) -> Result<VariantOutcome, EvalError> {
    let out = run_pipeline(dataset, registry, cfg, None)?;
    let ctx = EvalContext {
        model: &out.model,
        vocab: &out.vocab,
        registry,
        bundle: &out.bundle,
        pair_cfg: &cfg.pair_cfg,
    };
    let mut spec = ExperimentSpec::new(
        Family::Sequential,
        EvalSetting::AllItem,
        eval_prompts.to_vec(),
    );
    spec.policy = cfg.policy.clone();
    spec.beam = beam;
    spec.seed = seed;
    let reports = eval_sequential(&ctx, &spec)?;
    Ok(VariantOutcome {
        name: name.to_string(),
        vocab_size: out.vocab.size(),
        param_count: out.model.param_count_actual(),
        final_valid_loss: out.train_report.valid_curve.last().copied(),
        reports,
    })
}

fn run_variants(
    dataset: &Dataset,
    registry: &Registry,
    variants: Vec<(String, PipelineConfig)>,
    beam: usize,
    seed: u64,
    eval_prompts: &[PromptId],
) -> (Vec<VariantOutcome>, Option<String>) {
    let mut outcomes = Vec::new();
    for (name, cfg) in variants {
        match run_variant(
            dataset.clone(),
            registry,
            &name,
            &cfg,
            beam,
            seed,
            eval_prompts,
        ) {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => return (outcomes, Some(format!("variant {name:?} failed: {e}"))),
        }
    }
    (outcomes, None)
}

/// Sweep one comparison axis over a fresh synthetic dataset.
pub fn run_ablation(
    kind: AblationKind,
    cfg: &AblationConfig,
    registry: &Registry,
) -> AblationReport {
    let dataset = match generate_synthetic(&cfg.synth, cfg.seed) {
        Ok((dataset, _)) => dataset,
        Err(e) => {
            return AblationReport {
                kind,
                variants: Vec::new(),
                aborted: Some(format!("dataset generation failed: {e}")),
            }
        }
    };
    let variants = variant_configs(kind, &cfg.pipeline);
    let (variants, aborted) = run_variants(
        &dataset,
        registry,
        variants,
        cfg.beam,
        cfg.seed,
        &cfg.eval_prompts,
    );
    AblationReport {
        kind,
        variants,
        aborted,
    }
}
