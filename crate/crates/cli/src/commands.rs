//! One function per subcommand. Each mutating command resolves a run
//! directory from its config hash, writes its outputs there, and leaves a
//! manifest beside them.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::json;
use sha2::{Digest, Sha256};

use promptrec_core::corpus::{CorpusBundle, Dataset, SplitTag};
use promptrec_core::eval::ablate::{run_ablation, AblationConfig, AblationKind};
use promptrec_core::eval::pipeline::{
    build_pipeline_pairs, run_pipeline, train_pipeline_vocab, PipelineConfig,
};
use promptrec_core::eval::transfer::{transfer_zero_shot, TransferSpec};
use promptrec_core::eval::{
    eval_direct, eval_generation, eval_rating, eval_sequential, EvalContext, EvalReport,
    EvalSetting, ExperimentSpec,
};
use promptrec_core::model::{checkpoint, Model};
use promptrec_core::prompts::{Family, PromptId, Registry};
use promptrec_core::tokenizer::Vocab;

use crate::args::{DatasetArg, PipelineArgs};
use crate::rundir::{self, read_json, write_json, Manifest, RunDir};

const DATASET_FILE: &str = "dataset.json";
const REGISTRY_FILE: &str = "registry.toml";
const PIPELINE_FILE: &str = "pipeline.json";
const VOCAB_FILE: &str = "vocab.json";
const CHECKPOINT_DIR: &str = "checkpoint";

/// Hash-friendly description of a dataset source: the synth spec itself,
/// or the file path plus a digest of its bytes.
fn describe_dataset(arg: &DatasetArg) -> Result<serde_json::Value, Box<dyn Error>> {
    match arg {
        DatasetArg::Synth(spec) => Ok(json!({ "synth": spec })),
        DatasetArg::File(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| format!("cannot read dataset {}: {e}", path.display()))?;
            Ok(json!({
                "file": path.display().to_string(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }))
        }
    }
}

fn load_registry(path: Option<&Path>) -> Result<Registry, Box<dyn Error>> {
    Ok(match path {
        Some(p) => Registry::load(p)?,
        None => Registry::builtin(),
    })
}

fn announce(run: &RunDir) {
    println!("run directory: {}", run.path.display());
    println!("config hash:   {}", run.config_hash);
}

pub fn ingest(
    dataset: &DatasetArg,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let config = json!({ "dataset": describe_dataset(dataset)?, "seed": seed });
    let seeds = BTreeMap::from([("dataset".to_string(), seed)]);
    let run = rundir::create("ingest", &config, &seeds, out)?;
    announce(&run);

    let (data, synth_report) = dataset.load(seed)?;
    write_json(&run.path.join(DATASET_FILE), &data)?;
    write_json(&run.path.join("stats.json"), &data.stats())?;
    if let Some(report) = synth_report {
        write_json(&run.path.join("synth_report.json"), &report)?;
    }
    println!(
        "ingested {} reviews / {} interaction sequences",
        data.reviews.len(),
        data.sequences.len()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn build_corpus(
    dataset: &DatasetArg,
    registry_path: Option<&Path>,
    args: &PipelineArgs,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let registry = load_registry(registry_path)?;
    let cfg = args.to_config(&registry, seed)?;
    let config = json!({
        "dataset": describe_dataset(dataset)?,
        "registry": registry_path.map(|p| p.display().to_string()),
        "pipeline": &cfg,
        "seed": seed,
    });
    let seeds = BTreeMap::from([("pipeline".to_string(), seed)]);
    let run = rundir::create("build-corpus", &config, &seeds, out)?;
    announce(&run);

    let (data, _) = dataset.load(seed)?;
    let stage = build_pipeline_pairs(data, &registry, &cfg)?;
    write_json(&run.path.join("pairs.json"), &stage.pairs)?;
    write_json(
        &run.path.join("corpus_summary.json"),
        &json!({
            "pairs": stage.pairs.len(),
            "train_pairs": count_split(&stage, SplitTag::Train),
            "valid_pairs": count_split(&stage, SplitTag::Valid),
            "test_pairs": count_split(&stage, SplitTag::Test),
            "skipped_bindings": stage.skipped_bindings,
            "short_candidate_pools": stage.short_candidate_pools,
            "pretrain_prompts": stage.split.pretrain_ids,
            "zeroshot_prompts": stage.split.zeroshot_ids,
        }),
    )?;
    println!("rendered {} training pairs", stage.pairs.len());
    Ok(ExitCode::SUCCESS)
}

fn count_split(stage: &promptrec_core::eval::pipeline::PairStage, tag: SplitTag) -> usize {
    stage.pairs.iter().filter(|p| p.split == tag).count()
}

pub fn train_vocab(
    dataset: &DatasetArg,
    registry_path: Option<&Path>,
    args: &PipelineArgs,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let registry = load_registry(registry_path)?;
    let cfg = args.to_config(&registry, seed)?;
    let config = json!({
        "dataset": describe_dataset(dataset)?,
        "registry": registry_path.map(|p| p.display().to_string()),
        "pipeline": &cfg,
        "seed": seed,
    });
    let seeds = BTreeMap::from([("pipeline".to_string(), seed)]);
    let run = rundir::create("train-vocab", &config, &seeds, out)?;
    announce(&run);

    let (data, _) = dataset.load(seed)?;
    let stage = build_pipeline_pairs(data, &registry, &cfg)?;
    let vocab = train_pipeline_vocab(&stage, &cfg)?;
    vocab.save(&run.path.join(VOCAB_FILE))?;
    write_json(
        &run.path.join("vocab_summary.json"),
        &json!({
            "size": vocab.size(),
            "content_hash": vocab.content_hash(),
            "atomic_ids": cfg.atomic_ids,
        }),
    )?;
    println!("trained vocabulary of {} tokens", vocab.size());
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(
    dataset: &DatasetArg,
    registry_path: Option<&Path>,
    args: &PipelineArgs,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let registry = load_registry(registry_path)?;
    let cfg = args.to_config(&registry, seed)?;
    let config = json!({
        "dataset": describe_dataset(dataset)?,
        "registry": registry_path.map(|p| p.display().to_string()),
        "pipeline": &cfg,
        "seed": seed,
    });
    let seeds = BTreeMap::from([("pipeline".to_string(), seed)]);
    let run = rundir::create("pretrain", &config, &seeds, out)?;
    announce(&run);

    let (data, _) = dataset.load(seed)?;
    let ckpt_dir = run.path.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let output = run_pipeline(data, &registry, &cfg, Some(&ckpt_dir))?;

    // persist everything evaluation and transfer need to reload the run
    write_json(&run.path.join(DATASET_FILE), &output.bundle.dataset)?;
    std::fs::write(run.path.join(REGISTRY_FILE), registry.to_toml_string())?;
    write_json(&run.path.join(PIPELINE_FILE), &cfg)?;
    output.vocab.save(&run.path.join(VOCAB_FILE))?;
    write_json(&run.path.join("train_report.json"), &output.train_report)?;
    write_json(&run.path.join("pair_summary.json"), &output.pair_summary)?;

    let final_loss = output
        .train_report
        .steps
        .last()
        .map(|s| s.mean_loss)
        .unwrap_or(f64::NAN);
    let final_valid = output.train_report.valid_curve.last().copied();
    println!(
        "pretrained on {} pairs ({} steps, final loss {:.4}, valid {:?})",
        output.pair_summary.train_pairs,
        output.train_report.steps.len(),
        final_loss,
        final_valid,
    );
    Ok(ExitCode::SUCCESS)
}

/// Artifacts reloaded from a pretrain run directory.
struct LoadedRun {
    model: Model,
    vocab: Vocab,
    registry: Registry,
    pipeline: PipelineConfig,
    dataset: Dataset,
    checkpoint_file: PathBuf,
}

/// Accepts the pretrain run directory or a checkpoint file inside it.
fn load_pretrain_run(checkpoint: &Path) -> Result<LoadedRun, Box<dyn Error>> {
    let dir = if checkpoint.is_dir() {
        checkpoint.to_path_buf()
    } else {
        checkpoint
            .ancestors()
            .skip(1)
            .find(|d| d.join(VOCAB_FILE).is_file())
            .map(Path::to_path_buf)
            .ok_or_else(|| {
                format!(
                    "no {VOCAB_FILE} found beside {}; pass the pretrain run directory",
                    checkpoint.display()
                )
            })?
    };
    let checkpoint_file = if checkpoint.is_dir() {
        dir.join(CHECKPOINT_DIR).join("latest.json")
    } else {
        checkpoint.to_path_buf()
    };
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let (model, _step) = checkpoint::load(&checkpoint_file, Some(&vocab.content_hash()))?;
    let registry = Registry::load(&dir.join(REGISTRY_FILE))?;
    let pipeline: PipelineConfig = read_json(&dir.join(PIPELINE_FILE))?;
    let dataset: Dataset = read_json(&dir.join(DATASET_FILE))?;
    Ok(LoadedRun {
        model,
        vocab,
        registry,
        pipeline,
        dataset,
        checkpoint_file,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    checkpoint: &Path,
    dataset_override: Option<&DatasetArg>,
    prompts: &[PromptId],
    setting: EvalSetting,
    split: SplitTag,
    beam: usize,
    candidates: usize,
    max_new_tokens: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let loaded = load_pretrain_run(checkpoint)?;
    let family = prompts
        .first()
        .and_then(|id| id.family_enum())
        .ok_or("need at least one --prompt id")?;
    let seed = seed.unwrap_or(loaded.pipeline.pair_cfg.seed);

    let mut spec = ExperimentSpec::new(family, setting, prompts.to_vec());
    spec.policy = loaded.pipeline.policy.clone();
    spec.checkpoint = Some(loaded.checkpoint_file.clone());
    spec.split = split;
    spec.beam = beam;
    spec.candidates = candidates;
    spec.max_new_tokens = max_new_tokens;
    spec.seed = seed;
    spec.dataset_id = dataset_override
        .map(DatasetArg::id)
        .unwrap_or_else(|| "pretrain".to_string());
    spec.validate(&loaded.registry)?;

    let config = json!({
        "checkpoint": loaded.checkpoint_file.display().to_string(),
        "dataset": match dataset_override {
            Some(arg) => describe_dataset(arg)?,
            None => json!("pretrain"),
        },
        "spec": &spec,
    });
    let seeds = BTreeMap::from([("eval".to_string(), seed)]);
    let run = rundir::create("evaluate", &config, &seeds, out)?;
    announce(&run);

    // the bundle must reproduce the pretraining split exactly, so data the
    // model saw in training never leaks into the held-out evaluation sets
    let dataset = match dataset_override {
        Some(arg) => arg.load(seed)?.0,
        None => loaded.dataset,
    };
    let bundle = CorpusBundle::prepare(
        dataset,
        loaded.pipeline.ratios,
        loaded.pipeline.pair_cfg.seed,
    )?;
    let ctx = EvalContext {
        model: &loaded.model,
        vocab: &loaded.vocab,
        registry: &loaded.registry,
        bundle: &bundle,
        pair_cfg: &loaded.pipeline.pair_cfg,
    };
    let reports = match setting {
        EvalSetting::AllItem => eval_sequential(&ctx, &spec)?,
        EvalSetting::Candidate100 => eval_direct(&ctx, &spec)?,
        EvalSetting::Scalar if family == Family::Rating => eval_rating(&ctx, &spec)?,
        EvalSetting::Scalar | EvalSetting::Text => eval_generation(&ctx, &spec)?,
    };
    write_json(&run.path.join("eval_report.json"), &reports)?;
    print_eval_reports(&reports);
    Ok(ExitCode::SUCCESS)
}

fn print_eval_reports(reports: &[EvalReport]) {
    for report in reports {
        let kind = if report.seen { "seen" } else { "zero-shot" };
        println!("prompt {} ({kind}):", report.prompt_id);
        for (name, value) in &report.metrics {
            println!("  {name} = {value:.6}");
        }
        for (name, value) in &report.counts {
            println!("  {name} = {value}");
        }
    }
}

pub fn transfer(
    checkpoint: &Path,
    target: &DatasetArg,
    beam: usize,
    max_new_tokens: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let loaded = load_pretrain_run(checkpoint)?;
    let seed = seed.unwrap_or(loaded.pipeline.pair_cfg.seed);
    let mut spec = TransferSpec::default();
    spec.policy = loaded.pipeline.policy.clone();
    spec.beam = beam;
    if let Some(budget) = max_new_tokens {
        spec.max_new_tokens = budget;
    }
    spec.seed = seed;

    let config = json!({
        "checkpoint": loaded.checkpoint_file.display().to_string(),
        "target": describe_dataset(target)?,
        "spec": &spec,
    });
    let seeds = BTreeMap::from([("transfer".to_string(), seed)]);
    let run = rundir::create("transfer", &config, &seeds, out)?;
    announce(&run);

    let source_bundle = CorpusBundle::prepare(
        loaded.dataset,
        loaded.pipeline.ratios,
        loaded.pipeline.pair_cfg.seed,
    )?;
    let (target_data, _) = target.load(seed)?;
    let target_bundle = CorpusBundle::prepare(
        target_data,
        loaded.pipeline.ratios,
        loaded.pipeline.pair_cfg.seed,
    )?;
    let report = transfer_zero_shot(
        &loaded.model,
        &loaded.vocab,
        &loaded.registry,
        &source_bundle,
        &target_bundle,
        &loaded.pipeline.pair_cfg,
        &spec,
    )?;
    write_json(&run.path.join("transfer_report.json"), &report)?;

    println!(
        "shared users: {}, target reviews: {}, target items: {}",
        report.stats.shared_users, report.stats.target_reviews, report.stats.target_items
    );
    print_eval_reports(&[report.like.clone(), report.rating.clone()]);
    if let Some(explanation) = &report.explanation {
        print_eval_reports(std::slice::from_ref(explanation));
    }
    if let Some(sequential) = &report.sequential {
        print_eval_reports(std::slice::from_ref(sequential));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(
    kind: AblationKind,
    dataset: &DatasetArg,
    args: &PipelineArgs,
    beam: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode, Box<dyn Error>> {
    let DatasetArg::Synth(synth) = dataset else {
        return Err("ablate sweeps train variants from scratch; \
                    pass a synthetic dataset spec (--dataset synth:...)"
            .into());
    };
    let registry = Registry::builtin();
    let mut cfg = AblationConfig::default();
    cfg.synth = synth.clone();
    cfg.seed = seed;
    cfg.pipeline = args.to_config(&registry, seed)?;
    cfg.beam = beam;

    let config = json!({
        "kind": kind,
        "synth": synth,
        "pipeline": &cfg.pipeline,
        "beam": beam,
        "seed": seed,
    });
    let seeds = BTreeMap::from([("ablation".to_string(), seed)]);
    let run = rundir::create("ablate", &config, &seeds, out)?;
    announce(&run);

    let report = run_ablation(kind, &cfg, &registry);
    write_json(&run.path.join("ablation_report.json"), &report)?;

    for variant in &report.variants {
        println!(
            "variant {} (vocab {}, params {}):",
            variant.name, variant.vocab_size, variant.param_count
        );
        print_eval_reports(&variant.reports);
    }
    if let Some(message) = &report.aborted {
        eprintln!("ablation aborted: {message}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn report(run_dir: &Path) -> Result<ExitCode, Box<dyn Error>> {
    let manifest: Manifest = read_json(&run_dir.join(rundir::MANIFEST_FILE))?;
    println!("command:     {}", manifest.command);
    println!("config hash: {}", manifest.config_hash);
    for (name, value) in &manifest.seeds {
        println!("seed {name}: {value}");
    }
    for (name, version) in &manifest.versions {
        println!("{name} {version}");
    }

    // summarize whichever report files this run produced
    let eval_path = run_dir.join("eval_report.json");
    if eval_path.is_file() {
        let reports: Vec<EvalReport> = read_json(&eval_path)?;
        print_eval_reports(&reports);
    }
    for file in [
        "stats.json",
        "corpus_summary.json",
        "vocab_summary.json",
        "pair_summary.json",
        "transfer_report.json",
        "ablation_report.json",
    ] {
        let path = run_dir.join(file);
        if path.is_file() {
            let value: serde_json::Value = read_json(&path)?;
            println!("{file}: {}", serde_json::to_string_pretty(&value)?);
        }
    }
    let train_path = run_dir.join("train_report.json");
    if train_path.is_file() {
        let value: serde_json::Value = read_json(&train_path)?;
        let steps = value["steps"].as_array().map(Vec::len).unwrap_or(0);
        let last_loss = value["steps"]
            .as_array()
            .and_then(|s| s.last())
            .and_then(|s| s["mean_loss"].as_f64());
        println!(
            "train_report.json: {steps} steps, final loss {:?}, valid curve {}",
            last_loss, value["valid_curve"]
        );
    }
    Ok(ExitCode::SUCCESS)
}
