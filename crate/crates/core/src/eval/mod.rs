//! Evaluation harness: runs a trained model through the per-family
//! protocols — scalar rating prediction, all-item sequential ranking,
//! 1-of-N direct recommendation, and text generation — and aggregates
//! metric reports.
//!
//! Each operation takes an [`EvalContext`] (model, vocabulary, registry,
//! corpus) plus an [`ExperimentSpec`] and produces one [`EvalReport`] per
//! prompt id. Reports are reproducible bit-for-bit given the same
//! checkpoint, spec, and seed (the recorded wall-clock runtime is the one
//! intentional exception). Queries are evaluated concurrently over a
//! read-shared model; aggregation is a single-threaded reduction in input
//! order, so parallelism never changes results.
//!
//! Chance-level bars for ranking metrics are computed here in closed form
//! (`chance_hr`, `chance_ndcg`) rather than hard-coded, and every ranking
//! report embeds them alongside the measured values.

pub mod ablate;
pub mod pipeline;
pub mod transfer;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::pairs::{
    explanation_eval_data, rating_eval_data, review_eval_data, sequential_eval_queries,
    GenEvalDatum,
};
use crate::corpus::{
    item_token, CorpusBundle, CorpusError, PairBuildConfig, SplitTag, TrainingPair,
};
use crate::metrics::{self, MetricError, RankedList, TextPair};
use crate::model::{Model, ModelError};
use crate::prompts::{
    render, Family, FieldValue, PromptError, PromptId, PromptTemplate, Registry, RegistrySplit,
    SplitPolicy,
};
use crate::search::{constrained_beam, greedy_decode, ItemTrie, SearchError};
use crate::tokenizer::{Specials, TokenizerError, Vocab};
use crate::train::TrainError;

/// Errors raised while running an evaluation protocol.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("bad experiment spec: {reason}")]
    BadSpec { reason: String },
    #[error("prompt {prompt} belongs to family {actual}, spec says {expected}")]
    FamilyMismatch {
        prompt: PromptId,
        actual: &'static str,
        expected: &'static str,
    },
    #[error("setting {setting} is not valid for the {family} family")]
    SettingMismatch {
        setting: EvalSetting,
        family: &'static str,
    },
    #[error(
        "{rate:.1}% of generations were unparseable as grid ratings; samples: {samples:?}"
    )]
    TooManyUnparseable { rate: f64, samples: Vec<String> },
    #[error("beam width {beam} is narrower than the requested cutoff k={k}")]
    BeamTooNarrow { beam: usize, k: usize },
    #[error("item trie holds {trie} entries but the catalog has {catalog}: {reason}")]
    TrieCatalogMismatch {
        trie: usize,
        catalog: usize,
        reason: String,
    },
    #[error("no {what} to evaluate")]
    NoQueries { what: String },
    #[error("rendered input for user {user} leaks the held-out item")]
    HistoryLeak { user: String },
    #[error("prompt {prompt} is reserved for zero-shot use but appears in the training stream")]
    LeakedPrompt { prompt: PromptId },
    #[error("no users shared between source and target domains")]
    NoSharedUsers,
    #[error("item {item:?} has no atomic token; an id-per-token vocabulary cannot cover new items")]
    NovelAtomicItem { item: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// How generated output is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSetting {
    /// Rank the entire catalog (sequential family).
    AllItem,
    /// Rank a per-query candidate set (direct family).
    Candidate100,
    /// Parse a numeric answer (rating family, review preference).
    Scalar,
    /// Score free text against a reference (explanation, review summary).
    Text,
}

impl std::fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            EvalSetting::AllItem => "all-item",
            EvalSetting::Candidate100 => "candidate-100",
            EvalSetting::Scalar => "scalar",
            EvalSetting::Text => "text",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for EvalSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-item" => Ok(EvalSetting::AllItem),
            "cand100" | "candidate-100" => Ok(EvalSetting::Candidate100),
            "scalar" => Ok(EvalSetting::Scalar),
            "text" => Ok(EvalSetting::Text),
            other => Err(format!(
                "unknown setting {other:?} (expected all-item | cand100 | scalar | text)"
            )),
        }
    }
}

/// Everything one evaluation run needs to know, minus the loaded objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset_id: String,
    /// How the registry divides into pretrain and zero-shot templates.
    pub policy: SplitPolicy,
    /// Checkpoint the model was loaded from, for the record.
    pub checkpoint: Option<PathBuf>,
    pub family: Family,
    pub prompt_ids: Vec<PromptId>,
    pub setting: EvalSetting,
    /// Which review/interaction split to evaluate.
    pub split: SplitTag,
    /// Beam width for ranking settings.
    pub beam: usize,
    /// Candidate-set size for the candidate-100 setting (1 positive + the
    /// rest sampled negatives).
    pub candidates: usize,
    /// Decode budget for scalar/text settings; `None` picks a per-setting
    /// default.
    pub max_new_tokens: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentSpec {
    /// A spec with protocol defaults: test split, beam 20, 100 candidates.
    pub fn new(family: Family, setting: EvalSetting, prompt_ids: Vec<PromptId>) -> ExperimentSpec {
        ExperimentSpec {
            dataset_id: "default".to_string(),
            policy: SplitPolicy::LastPerFamily,
            checkpoint: None,
            family,
            prompt_ids,
            setting,
            split: SplitTag::Test,
            beam: 20,
            candidates: 100,
            max_new_tokens: None,
            out: None,
            seed: 0,
        }
    }

    /// Check the family/prompt/setting invariants against a registry.
    pub fn validate(&self, registry: &Registry) -> Result<(), EvalError> {
        if self.prompt_ids.is_empty() {
            return Err(EvalError::BadSpec {
                reason: "no prompt ids".to_string(),
            });
        }
        for &id in &self.prompt_ids {
            let template = registry.get(id)?;
            if template.family != self.family {
                return Err(EvalError::FamilyMismatch {
                    prompt: id,
                    actual: template.family.name(),
                    expected: self.family.name(),
                });
            }
        }
        let ok = match self.setting {
            EvalSetting::AllItem => self.family == Family::Sequential,
            EvalSetting::Candidate100 => self.family == Family::Direct,
            EvalSetting::Scalar => {
                self.family == Family::Rating || self.family == Family::Review
            }
            EvalSetting::Text => {
                self.family == Family::Explanation || self.family == Family::Review
            }
        };
        if !ok {
            return Err(EvalError::SettingMismatch {
                setting: self.setting,
                family: self.family.name(),
            });
        }
        if self.beam == 0 {
            return Err(EvalError::BadSpec {
                reason: "beam width must be at least 1".to_string(),
            });
        }
        if self.setting == EvalSetting::Candidate100 && self.candidates == 0 {
            return Err(EvalError::BadSpec {
                reason: "candidate set must hold at least the positive".to_string(),
            });
        }
        Ok(())
    }

    fn budget(&self) -> usize {
        self.max_new_tokens.unwrap_or(match self.setting {
            EvalSetting::Scalar => 16,
            _ => 64,
        })
    }
}

/// Loaded objects shared by every evaluation operation.
pub struct EvalContext<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub registry: &'a Registry,
    pub bundle: &'a CorpusBundle,
    pub pair_cfg: &'a PairBuildConfig,
}

impl EvalContext<'_> {
    /// The pair-building config with the spec's seed substituted, so all
    /// evaluation-side sampling is driven by the spec alone.
    fn cfg_for(&self, spec: &ExperimentSpec) -> PairBuildConfig {
        let mut cfg = self.pair_cfg.clone();
        cfg.seed = spec.seed;
        cfg
    }

    fn split_for(&self, spec: &ExperimentSpec) -> Result<RegistrySplit, EvalError> {
        Ok(self.registry.split_for_pretrain(&spec.policy)?)
    }
}

/// One prompt's evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt_id: PromptId,
    /// True when the prompt was part of pretraining; false for zero-shot.
    pub seen: bool,
    /// Metric name → value, all on their natural scale (ranking and text
    /// metrics in [0, 1]; multiply by 100 for percent-style tables).
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub runtime_secs: f64,
}

impl EvalReport {
    fn new(prompt_id: PromptId, seen: bool) -> EvalReport {
        EvalReport {
            prompt_id,
            seen,
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            runtime_secs: 0.0,
        }
    }

    fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    fn count(&mut self, name: &str, value: usize) -> &mut Self {
        self.counts.insert(name.to_string(), value);
        self
    }
}

// ---------------------------------------------------------------------------
// Chance-level oracles
// ---------------------------------------------------------------------------

/// Probability that a uniformly random ranking of `catalog` items puts the
/// single relevant item in the top `k`.
pub fn chance_hr(k: usize, catalog: usize) -> f64 {
    assert!(k > 0 && catalog > 0, "chance_hr needs k ≥ 1 and a catalog");
    (k as f64 / catalog as f64).min(1.0)
}

/// Expected single-relevant NDCG@k of a uniformly random ranking: the item
/// lands at each rank r with probability 1/catalog and contributes
/// 1/log₂(r+1) when r ≤ k.
pub fn chance_ndcg(k: usize, catalog: usize) -> f64 {
    assert!(k > 0 && catalog > 0, "chance_ndcg needs k ≥ 1 and a catalog");
    (1..=k.min(catalog))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum::<f64>()
        / catalog as f64
}

// ---------------------------------------------------------------------------
// Zero-shot leakage guard
// ---------------------------------------------------------------------------

/// Assert that a training pair stream never uses a held-out prompt.
pub fn verify_no_prompt_leakage(
    pairs: &[TrainingPair],
    split: &RegistrySplit,
) -> Result<(), EvalError> {
    for pair in pairs {
        if split.is_zeroshot(pair.prompt_id) {
            return Err(EvalError::LeakedPrompt {
                prompt: pair.prompt_id,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

/// Map a fallible function over items on scoped threads, preserving input
/// order. Contiguous chunks keep aggregation deterministic.
fn par_try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>, EvalError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, EvalError> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
        .min(items.len().max(1));
    if workers <= 1 || items.len() < 16 {
        return items.iter().map(&f).collect();
    }
    let chunk_size = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk_size)
            .map(|chunk| scope.spawn(|| chunk.iter().map(&f).collect::<Result<Vec<R>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for handle in handles {
            out.extend(handle.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Render a template's input for one datum, taking only the fields the
/// template needs from the master bindings.
fn render_input(
    template: &PromptTemplate,
    master: &crate::prompts::FieldBindings,
) -> Result<String, EvalError> {
    let bound = master.subset_for(template)?;
    Ok(render(template, &bound)?.input)
}

/// Greedy-decode a response to `input_text` and return the decoded string.
fn decode_text(
    model: &Model,
    vocab: &Vocab,
    input_text: &str,
    budget: usize,
) -> Result<String, EvalError> {
    let enc = vocab.encode(input_text, model.config.max_len)?;
    let out = greedy_decode(model, &enc, budget)?;
    Ok(vocab.decode(&out.token_ids)?)
}

/// Token ids an item decodes through: its rendered form, encoded, with the
/// trailing end-of-sequence marker stripped.
fn item_ids(vocab: &Vocab, max_len: usize, rendered: &str) -> Result<Vec<usize>, EvalError> {
    let enc = vocab.encode(rendered, max_len)?;
    let ids = enc.token_ids;
    debug_assert_eq!(ids.last(), Some(&Specials::EOS));
    Ok(ids[..ids.len() - 1].to_vec())
}

/// Build a decoding trie over rendered item names. Collisions (two items
/// encoding to identical token sequences, e.g. after length truncation)
/// surface as a trie/catalog mismatch.
fn build_item_trie(
    vocab: &Vocab,
    max_len: usize,
    rendered_items: &[String],
) -> Result<ItemTrie, EvalError> {
    let mut trie = ItemTrie::new();
    for item in rendered_items {
        let ids = item_ids(vocab, max_len, item)?;
        trie.insert(item, &ids)
            .map_err(|e| EvalError::TrieCatalogMismatch {
                trie: trie.len(),
                catalog: rendered_items.len(),
                reason: e.to_string(),
            })?;
    }
    if trie.len() != rendered_items.len() {
        return Err(EvalError::TrieCatalogMismatch {
            trie: trie.len(),
            catalog: rendered_items.len(),
            reason: "entry count differs after construction".to_string(),
        });
    }
    Ok(trie)
}

fn require_target_field(template: &PromptTemplate, field: &str) -> Result<(), EvalError> {
    let expected = format!("{{{field}}}");
    if template.target_template != expected {
        return Err(EvalError::BadSpec {
            reason: format!(
                "prompt {} targets {:?}, but this protocol decodes {expected}",
                template.id, template.target_template
            ),
        });
    }
    Ok(())
}

/// Outcome of parsing decoded strings as grid ratings. The parse rules are
/// shared verbatim between rating evaluation and review-preference
/// evaluation.
#[derive(Debug, Clone)]
pub struct NumericParse {
    /// One prediction per output; unparseable outputs score the scale
    /// midpoint 3.0 so error metrics stay defined while format failures
    /// are penalized.
    pub preds: Vec<f64>,
    /// Outputs that parsed onto the 41-class grid.
    pub on_grid: usize,
    pub unparseable: usize,
    /// Up to five unparseable outputs, for diagnostics.
    pub samples: Vec<String>,
}

/// The parse rules alone: grid parse, midpoint substitution, counting.
/// Used directly where a high unparseable rate is itself the finding
/// (zero-shot domain transfer).
pub(crate) fn parse_numeric_raw(outputs: &[String]) -> NumericParse {
    use crate::corpus::RatingTenths;
    let mut parse = NumericParse {
        preds: Vec::with_capacity(outputs.len()),
        on_grid: 0,
        unparseable: 0,
        samples: Vec::new(),
    };
    for output in outputs {
        match RatingTenths::parse(output.trim()) {
            Some(value) => {
                parse.on_grid += 1;
                parse.preds.push(value.as_f64());
            }
            None => {
                parse.unparseable += 1;
                if parse.samples.len() < 5 {
                    parse.samples.push(output.clone());
                }
                parse.preds.push(3.0);
            }
        }
    }
    parse
}

/// Parse greedy-decoded strings as grid ratings; more than half
/// unparseable fails the run with a diagnostic sample.
pub fn parse_numeric_predictions(outputs: &[String]) -> Result<NumericParse, EvalError> {
    let parse = parse_numeric_raw(outputs);
    if !outputs.is_empty() {
        let rate = parse.unparseable as f64 / outputs.len() as f64;
        if rate > 0.5 {
            return Err(EvalError::TooManyUnparseable {
                rate: rate * 100.0,
                samples: parse.samples,
            });
        }
    }
    Ok(parse)
}

fn ranking_metrics(
    report: &mut EvalReport,
    lists: &[RankedList],
    ks: &[usize],
    pool: usize,
    with_chance: bool,
) -> Result<(), EvalError> {
    for &k in ks {
        report.metric(&format!("hr@{k}"), metrics::hr_at_k(lists, k)?);
        if with_chance {
            report.metric(&format!("chance_hr@{k}"), chance_hr(k, pool));
        }
        if k > 1 {
            report.metric(&format!("ndcg@{k}"), metrics::ndcg_at_k(lists, k)?);
            if with_chance {
                report.metric(&format!("chance_ndcg@{k}"), chance_ndcg(k, pool));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rating evaluation
// ---------------------------------------------------------------------------

/// Greedy-decode a numeric answer per test review and score RMSE/MAE
/// against the true grid value. One report per prompt id.
pub fn eval_rating(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
) -> Result<Vec<EvalReport>, EvalError> {
    spec.validate(ctx.registry)?;
    if spec.family != Family::Rating {
        return Err(EvalError::BadSpec {
            reason: format!("eval_rating got the {} family", spec.family.name()),
        });
    }
    let cfg = ctx.cfg_for(spec);
    let data = rating_eval_data(ctx.bundle, &cfg, spec.split)?;
    if data.is_empty() {
        return Err(EvalError::NoQueries {
            what: format!("{} rating reviews", spec.split),
        });
    }
    let registry_split = ctx.split_for(spec)?;
    let truths: Vec<f64> = data.iter().map(|d| d.truth.as_f64()).collect();

    let mut reports = Vec::new();
    for &id in &spec.prompt_ids {
        let template = ctx.registry.get(id)?;
        let start = Instant::now();
        let outputs = par_try_map(&data, |datum| {
            let input = render_input(template, &datum.master)?;
            decode_text(ctx.model, ctx.vocab, &input, spec.budget())
        })?;
        let parse = parse_numeric_predictions(&outputs)?;

        let mut report = EvalReport::new(id, registry_split.is_pretrain(id));
        report
            .metric("rmse", metrics::rmse(&parse.preds, &truths)?)
            .metric("mae", metrics::mae(&parse.preds, &truths)?)
            .metric(
                "unparseable_rate",
                parse.unparseable as f64 / data.len() as f64,
            )
            .count("queries", data.len())
            .count("on_grid", parse.on_grid)
            .count("unparseable", parse.unparseable);
        report.runtime_secs = start.elapsed().as_secs_f64();
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Sequential evaluation (all-item)
// ---------------------------------------------------------------------------

/// Rank the full catalog per held-out interaction with a constrained beam
/// and score HR@{5,10} / NDCG@{5,10}.
pub fn eval_sequential(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
) -> Result<Vec<EvalReport>, EvalError> {
    spec.validate(ctx.registry)?;
    if spec.setting != EvalSetting::AllItem {
        return Err(EvalError::SettingMismatch {
            setting: spec.setting,
            family: spec.family.name(),
        });
    }
    let ks = [5usize, 10];
    let max_k = *ks.iter().max().expect("fixed cutoffs");
    if spec.beam < max_k {
        return Err(EvalError::BeamTooNarrow {
            beam: spec.beam,
            k: max_k,
        });
    }

    let rendered_catalog: Vec<String> = ctx
        .bundle
        .catalog
        .iter()
        .map(|i| item_token(i))
        .collect();
    let trie = build_item_trie(ctx.vocab, ctx.model.config.max_len, &rendered_catalog)?;

    let cfg = ctx.cfg_for(spec);
    let (queries, skipped_repeats) = sequential_eval_queries(ctx.bundle, &cfg, spec.split)?;
    if queries.is_empty() {
        return Err(EvalError::NoQueries {
            what: format!("{} sequential queries", spec.split),
        });
    }

    let registry_split = ctx.split_for(spec)?;
    let mut reports = Vec::new();
    for &id in &spec.prompt_ids {
        let template = ctx.registry.get(id)?;
        require_target_field(template, "target_item")?;
        let start = Instant::now();
        let lists = par_try_map(&queries, |query| {
            let target_token = item_token(&query.target);
            // leakage guard: the held-out item must not appear in the
            // rendered history (checked on the exact rendered entries)
            if query.history.contains(&query.target) {
                return Err(EvalError::HistoryLeak {
                    user: query.user_id.clone(),
                });
            }
            if let Some(FieldValue::List { items, .. }) = query.master.get("history") {
                if items.contains(&target_token) {
                    return Err(EvalError::HistoryLeak {
                        user: query.user_id.clone(),
                    });
                }
            }
            let input = render_input(template, &query.master)?;
            let ranked = constrained_beam(ctx.model, &ctx.vocab.encode(
                &input,
                ctx.model.config.max_len,
            )?, spec.beam, &trie)?;
            Ok(RankedList {
                query_id: query.user_id.clone(),
                ranking: ranked.into_iter().map(|r| r.item).collect(),
                truth: target_token,
            })
        })?;

        let mut report = EvalReport::new(id, registry_split.is_pretrain(id));
        ranking_metrics(&mut report, &lists, &ks, rendered_catalog.len(), true)?;
        report
            .count("queries", lists.len())
            .count("skipped_repeats", skipped_repeats)
            .count("catalog_size", rendered_catalog.len());
        report.runtime_secs = start.elapsed().as_secs_f64();
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Direct evaluation (1-of-N candidates)
// ---------------------------------------------------------------------------

/// Rank a per-query candidate set (1 positive + sampled negatives) and
/// score HR@{1,5,10} / NDCG@{5,10}.
pub fn eval_direct(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
) -> Result<Vec<EvalReport>, EvalError> {
    spec.validate(ctx.registry)?;
    if spec.setting != EvalSetting::Candidate100 {
        return Err(EvalError::SettingMismatch {
            setting: spec.setting,
            family: spec.family.name(),
        });
    }
    let ks: Vec<usize> = [1usize, 5, 10]
        .into_iter()
        .filter(|&k| k == 1 || k <= spec.candidates)
        .collect();
    let max_k = *ks.iter().max().expect("fixed cutoffs");
    if spec.beam < max_k.min(spec.candidates) {
        return Err(EvalError::BeamTooNarrow {
            beam: spec.beam,
            k: max_k,
        });
    }

    let cfg = ctx.cfg_for(spec);
    let queries = crate::corpus::pairs::direct_eval_queries(
        ctx.bundle,
        &cfg,
        spec.candidates.saturating_sub(1),
        spec.split,
    )?;
    if queries.is_empty() {
        return Err(EvalError::NoQueries {
            what: format!("{} direct queries", spec.split),
        });
    }

    let registry_split = ctx.split_for(spec)?;
    let mut reports = Vec::new();
    for &id in &spec.prompt_ids {
        let template = ctx.registry.get(id)?;
        require_target_field(template, "target_item")?;
        let start = Instant::now();
        let lists = par_try_map(&queries, |query| {
            let rendered: Vec<String> =
                query.candidates.iter().map(|c| item_token(c)).collect();
            let trie = build_item_trie(ctx.vocab, ctx.model.config.max_len, &rendered)?;
            let input = render_input(template, &query.master)?;
            let ranked = constrained_beam(ctx.model, &ctx.vocab.encode(
                &input,
                ctx.model.config.max_len,
            )?, spec.beam, &trie)?;
            Ok(RankedList {
                query_id: query.user_id.clone(),
                ranking: ranked.into_iter().map(|r| r.item).collect(),
                truth: item_token(&query.positive),
            })
        })?;

        let mut report = EvalReport::new(id, registry_split.is_pretrain(id));
        ranking_metrics(&mut report, &lists, &ks, spec.candidates, true)?;
        report
            .count("queries", lists.len())
            .count("candidates", spec.candidates);
        report.runtime_secs = start.elapsed().as_secs_f64();
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Generation evaluation (explanation, review summary, review preference)
// ---------------------------------------------------------------------------

/// Greedy-decode free text per test datum. Templates whose target is a
/// text field score BLEU-4 + ROUGE-1/2/L; review templates whose target is
/// the rating reuse the numeric parse path and score RMSE/MAE.
pub fn eval_generation(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
) -> Result<Vec<EvalReport>, EvalError> {
    spec.validate(ctx.registry)?;
    if spec.family != Family::Explanation && spec.family != Family::Review {
        return Err(EvalError::BadSpec {
            reason: format!("eval_generation got the {} family", spec.family.name()),
        });
    }
    let registry_split = ctx.split_for(spec)?;

    let mut reports = Vec::new();
    for &id in &spec.prompt_ids {
        let template = ctx.registry.get(id)?;
        let preference = template.target_template == "{star_rating}";
        if preference != (spec.setting == EvalSetting::Scalar) {
            return Err(EvalError::SettingMismatch {
                setting: spec.setting,
                family: spec.family.name(),
            });
        }
        let report = if preference {
            eval_review_preference(ctx, spec, template, &registry_split)?
        } else {
            eval_text_generation(ctx, spec, template, &registry_split)?
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Review-preference scoring: identical parse path to rating evaluation.
fn eval_review_preference(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
    template: &PromptTemplate,
    registry_split: &RegistrySplit,
) -> Result<EvalReport, EvalError> {
    let data = review_eval_data(ctx.bundle, spec.split);
    if data.is_empty() {
        return Err(EvalError::NoQueries {
            what: format!("{} reviews", spec.split),
        });
    }
    let start = Instant::now();
    let outputs = par_try_map(&data, |datum| {
        let input = render_input(template, &datum.master)?;
        decode_text(ctx.model, ctx.vocab, &input, spec.budget())
    })?;
    let parse = parse_numeric_predictions(&outputs)?;
    let truths: Vec<f64> = data.iter().map(|d| d.rating_truth.as_f64()).collect();

    let mut report = EvalReport::new(template.id, registry_split.is_pretrain(template.id));
    report
        .metric("rmse", metrics::rmse(&parse.preds, &truths)?)
        .metric("mae", metrics::mae(&parse.preds, &truths)?)
        .metric(
            "unparseable_rate",
            parse.unparseable as f64 / data.len() as f64,
        )
        .count("queries", data.len())
        .count("on_grid", parse.on_grid)
        .count("unparseable", parse.unparseable);
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Text scoring for explanation and review-summary templates.
fn eval_text_generation(
    ctx: &EvalContext,
    spec: &ExperimentSpec,
    template: &PromptTemplate,
    registry_split: &RegistrySplit,
) -> Result<EvalReport, EvalError> {
    // (bindings, reference) per datum, with data the template cannot bind
    // (e.g. a feature-hinted prompt on a review without a feature word)
    // skipped and counted
    let (data, without_reference): (Vec<GenEvalDatum>, usize) = match spec.family {
        Family::Explanation => explanation_eval_data(ctx.bundle, spec.split),
        Family::Review => {
            let data = review_eval_data(ctx.bundle, spec.split)
                .into_iter()
                .map(|d| GenEvalDatum {
                    user_id: d.user_id,
                    reference: d.summary_ref.clone(),
                    master: d.master,
                })
                .collect();
            (data, 0)
        }
        _ => unreachable!("validated above"),
    };
    let mut usable = Vec::new();
    let mut skipped_bindings = 0usize;
    for datum in data {
        match datum.master.subset_for(template) {
            Ok(_) => usable.push(datum),
            Err(PromptError::MissingBinding { .. }) => skipped_bindings += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if usable.is_empty() {
        return Err(EvalError::NoQueries {
            what: format!("{} bindable text data for prompt {}", spec.split, template.id),
        });
    }

    let start = Instant::now();
    let outputs = par_try_map(&usable, |datum| {
        let input = render_input(template, &datum.master)?;
        decode_text(ctx.model, ctx.vocab, &input, spec.budget())
    })?;

    let pairs: Vec<TextPair> = usable
        .iter()
        .zip(&outputs)
        .map(|(datum, output)| TextPair {
            candidate: output.clone(),
            reference: datum.reference.clone(),
        })
        .collect();
    let empty_generations = outputs.iter().filter(|o| o.trim().is_empty()).count();

    let mut report = EvalReport::new(template.id, registry_split.is_pretrain(template.id));
    // an all-empty corpus leaves BLEU undefined; the count still records it
    if empty_generations < outputs.len() {
        report.metric("bleu-4", metrics::bleu4(&pairs)?);
    }
    report
        .metric("rouge-1", metrics::rouge_n(&pairs, 1)?)
        .metric("rouge-2", metrics::rouge_n(&pairs, 2)?)
        .metric("rouge-l", metrics::rouge_l(&pairs)?)
        .count("queries", usable.len())
        .count("empty_generations", empty_generations)
        .count("skipped_bindings", skipped_bindings + without_reference);

    // feature-hinted prompts: report how often the hint word survived into
    // the generation
    if template.required_fields.contains("feature") {
        let mut hits = 0usize;
        for (datum, output) in usable.iter().zip(&outputs) {
            if let Some(FieldValue::Text(feature)) = datum.master.get("feature") {
                if output.to_lowercase().contains(&feature.to_lowercase()) {
                    hits += 1;
                }
            }
        }
        report.count("hint_hits", hits).count("hint_total", usable.len());
    }
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate_synthetic, PlantedRule, SynthSpec};
    use crate::corpus::{datum_rng, SplitRatios};
    use crate::model::ModelConfig;
    use rand::Rng;
    use std::sync::OnceLock;

    /// Tiny untrained world shared by the protocol-plumbing tests.
    struct World {
        bundle: CorpusBundle,
        vocab: Vocab,
        model: Model,
        registry: Registry,
        pair_cfg: PairBuildConfig,
    }

    fn untrained_world() -> &'static World {
        static WORLD: OnceLock<World> = OnceLock::new();
        WORLD.get_or_init(|| {
            let spec = SynthSpec {
                users: 60,
                items: 30,
                seq_len_min: 6,
                seq_len_max: 9,
                reviews_per_user: 3,
                rule: PlantedRule::LastTwoSum,
                ..SynthSpec::default()
            };
            let (dataset, _) = generate_synthetic(&spec, 9).unwrap();
            let bundle =
                CorpusBundle::prepare(dataset, SplitRatios::default(), 9).unwrap();
            let registry = Registry::builtin();
            let pair_cfg = PairBuildConfig::default();
            let split = registry
                .split_for_pretrain(&SplitPolicy::LastPerFamily)
                .unwrap();
            let report =
                crate::corpus::pairs::build_training_pairs(&bundle, &registry, &split, &pair_cfg)
                    .unwrap();
            let texts: Vec<String> = report
                .pairs
                .iter()
                .flat_map(|p| [p.input.clone(), p.target.clone()])
                .collect();
            let (vocab, _) =
                Vocab::train(texts.iter().map(|s| s.as_str()), 320).unwrap();
            let mut mc = ModelConfig::toy(vocab.size());
            mc.d_model = 16;
            mc.heads = 2;
            mc.d_ff = 32;
            mc.enc_layers = 1;
            mc.dec_layers = 1;
            mc.max_len = 96;
            mc.max_whole_words = 96;
            mc.seed = 5;
            let model = Model::new(mc).unwrap();
            World {
                bundle,
                vocab,
                model,
                registry,
                pair_cfg,
            }
        })
    }

    fn ctx(world: &World) -> EvalContext<'_> {
        EvalContext {
            model: &world.model,
            vocab: &world.vocab,
            registry: &world.registry,
            bundle: &world.bundle,
            pair_cfg: &world.pair_cfg,
        }
    }

    fn id(family: Family, index: u32) -> PromptId {
        PromptId::new(family, index)
    }

    // -- spec validation ------------------------------------------------------

    #[test]
    fn spec_rejects_family_and_setting_mismatches() {
        let world = untrained_world();
        // rating prompt declared as sequential family
        let mut spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::AllItem,
            vec![id(Family::Rating, 1)],
        );
        assert!(matches!(
            spec.validate(&world.registry),
            Err(EvalError::FamilyMismatch { .. })
        ));
        // candidate-100 is reserved for the direct family
        spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::Candidate100,
            vec![id(Family::Sequential, 1)],
        );
        assert!(matches!(
            spec.validate(&world.registry),
            Err(EvalError::SettingMismatch { .. })
        ));
        // all-item is reserved for the sequential family
        spec = ExperimentSpec::new(
            Family::Direct,
            EvalSetting::AllItem,
            vec![id(Family::Direct, 2)],
        );
        assert!(matches!(
            spec.validate(&world.registry),
            Err(EvalError::SettingMismatch { .. })
        ));
        // empty prompt list
        spec = ExperimentSpec::new(Family::Rating, EvalSetting::Scalar, vec![]);
        assert!(matches!(
            spec.validate(&world.registry),
            Err(EvalError::BadSpec { .. })
        ));
    }

    #[test]
    fn setting_parses_both_spellings() {
        assert_eq!(
            "cand100".parse::<EvalSetting>().unwrap(),
            EvalSetting::Candidate100
        );
        assert_eq!(
            "candidate-100".parse::<EvalSetting>().unwrap(),
            EvalSetting::Candidate100
        );
        assert_eq!("all-item".parse::<EvalSetting>().unwrap(), EvalSetting::AllItem);
        assert!("beam".parse::<EvalSetting>().is_err());
    }

    // -- chance oracles ---------------------------------------------------------

    #[test]
    fn chance_oracles_match_monte_carlo() {
        use rand::seq::SliceRandom;
        let mut rng = datum_rng(7, "chance-mc");
        for &(k, m) in &[(5usize, 30usize), (10, 30), (1, 100), (10, 100)] {
            let trials = 200_000;
            let mut hr_hits = 0usize;
            let mut ndcg_sum = 0.0;
            let mut order: Vec<usize> = (0..m).collect();
            for _ in 0..trials {
                order.shuffle(&mut rng);
                // relevant item is index 0; find its rank
                let rank = order.iter().position(|&x| x == 0).unwrap() + 1;
                if rank <= k {
                    hr_hits += 1;
                    ndcg_sum += 1.0 / ((rank + 1) as f64).log2();
                }
            }
            let hr_mc = hr_hits as f64 / trials as f64;
            let ndcg_mc = ndcg_sum / trials as f64;
            assert!(
                (hr_mc - chance_hr(k, m)).abs() < 0.005,
                "hr chance k={k} m={m}: mc {hr_mc} vs {}",
                chance_hr(k, m)
            );
            assert!(
                (ndcg_mc - chance_ndcg(k, m)).abs() < 0.005,
                "ndcg chance k={k} m={m}: mc {ndcg_mc} vs {}",
                chance_ndcg(k, m)
            );
        }
    }

    #[test]
    fn chance_hr_saturates_at_one() {
        assert_eq!(chance_hr(10, 5), 1.0);
        assert!((chance_ndcg(10, 1) - 1.0).abs() < 1e-12);
    }

    // -- leakage guard ------------------------------------------------------------

    #[test]
    fn prompt_leakage_is_detected() {
        let world = untrained_world();
        let split = world
            .registry
            .split_for_pretrain(&SplitPolicy::LastPerFamily)
            .unwrap();
        let zeroshot = *split.zeroshot_ids.iter().next().unwrap();
        let pairs = vec![TrainingPair {
            prompt_id: zeroshot,
            family: zeroshot.family_enum().unwrap(),
            split: SplitTag::Train,
            input: "x".into(),
            target: "y".into(),
        }];
        assert!(matches!(
            verify_no_prompt_leakage(&pairs, &split),
            Err(EvalError::LeakedPrompt { .. })
        ));
        assert!(verify_no_prompt_leakage(&[], &split).is_ok());
    }

    // -- numeric parse path ---------------------------------------------------------

    #[test]
    fn numeric_parse_scores_midpoint_and_errors_past_half() {
        let outputs: Vec<String> = vec!["4.0".into(), "nonsense".into(), "2.5".into()];
        let parse = parse_numeric_predictions(&outputs).unwrap();
        assert_eq!(parse.preds, vec![4.0, 3.0, 2.5]);
        assert_eq!(parse.on_grid, 2);
        assert_eq!(parse.unparseable, 1);
        assert_eq!(parse.samples, vec!["nonsense".to_string()]);

        let outputs: Vec<String> =
            vec!["junk".into(), "more junk".into(), "5.0".into()];
        match parse_numeric_predictions(&outputs) {
            Err(EvalError::TooManyUnparseable { rate, samples }) => {
                assert!((rate - 200.0 / 3.0).abs() < 1e-9);
                assert_eq!(samples.len(), 2);
            }
            other => panic!("expected unparseable failure, got {other:?}"),
        }
    }

    #[test]
    fn exact_midpoint_predictions_give_zero_error() {
        // all parsed "3.0" against truth 3.0 — the identity case
        let outputs: Vec<String> = vec!["3.0".into(); 4];
        let parse = parse_numeric_predictions(&outputs).unwrap();
        let truths = vec![3.0; 4];
        assert_eq!(metrics::rmse(&parse.preds, &truths).unwrap(), 0.0);
        assert_eq!(metrics::mae(&parse.preds, &truths).unwrap(), 0.0);
    }

    // -- untrained chance-level behaviour -----------------------------------------

    #[test]
    fn untrained_rating_eval_fails_as_unparseable() {
        let world = untrained_world();
        let spec = ExperimentSpec::new(
            Family::Rating,
            EvalSetting::Scalar,
            vec![id(Family::Rating, 6)],
        );
        // an untrained model emits noise, so the >50% unparseable guard fires
        match eval_rating(&ctx(world), &spec) {
            Err(EvalError::TooManyUnparseable { samples, .. }) => {
                assert!(!samples.is_empty());
            }
            Ok(reports) => {
                // astronomically unlikely, but if it parses, the report is sane
                assert!(reports[0].metrics.contains_key("rmse"));
            }
            Err(other) => panic!("unexpected failure: {other}"),
        }
    }

    #[test]
    fn untrained_sequential_eval_scores_near_chance() {
        let world = untrained_world();
        let spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::AllItem,
            vec![id(Family::Sequential, 1)],
        );
        let reports = eval_sequential(&ctx(world), &spec).unwrap();
        let report = &reports[0];
        let hr5 = report.metrics["hr@5"];
        let chance = report.metrics["chance_hr@5"];
        assert!((chance - chance_hr(5, 30)).abs() < 1e-12);
        // the planted truths are near-uniform over the catalog, so an
        // untrained ranking hits at roughly the chance rate (4σ slack)
        let queries = report.counts["queries"] as f64;
        let sigma = (chance * (1.0 - chance) / queries).sqrt();
        assert!(
            (hr5 - chance).abs() < 4.0 * sigma + 0.05,
            "hr@5 {hr5} vs chance {chance} over {queries} queries"
        );
        assert_eq!(report.counts["catalog_size"], 30);
        assert!(!report.seen || report.prompt_id.index != 13);
    }

    #[test]
    fn sequential_eval_rejects_narrow_beams_and_wrong_targets() {
        let world = untrained_world();
        let mut spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::AllItem,
            vec![id(Family::Sequential, 1)],
        );
        spec.beam = 4;
        assert!(matches!(
            eval_sequential(&ctx(world), &spec),
            Err(EvalError::BeamTooNarrow { beam: 4, k: 10 })
        ));
        // template 2-2 answers yes/no, not an item id
        let spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::AllItem,
            vec![id(Family::Sequential, 2)],
        );
        assert!(matches!(
            eval_sequential(&ctx(world), &spec),
            Err(EvalError::BadSpec { .. })
        ));
    }

    #[test]
    fn direct_eval_single_candidate_always_hits() {
        let world = untrained_world();
        let mut spec = ExperimentSpec::new(
            Family::Direct,
            EvalSetting::Candidate100,
            vec![id(Family::Direct, 5)],
        );
        spec.candidates = 1;
        let reports = eval_direct(&ctx(world), &spec).unwrap();
        assert_eq!(reports[0].metrics["hr@1"], 1.0);
        assert_eq!(reports[0].counts["candidates"], 1);
    }

    #[test]
    fn untrained_direct_eval_scores_near_chance() {
        let world = untrained_world();
        let mut spec = ExperimentSpec::new(
            Family::Direct,
            EvalSetting::Candidate100,
            vec![id(Family::Direct, 5)],
        );
        spec.candidates = 20; // catalog is 30; leave room for negatives
        let reports = eval_direct(&ctx(world), &spec).unwrap();
        let report = &reports[0];
        let hr1 = report.metrics["hr@1"];
        let chance = chance_hr(1, 20);
        assert_eq!(report.metrics["chance_hr@5"], chance_hr(5, 20));
        let queries = report.counts["queries"] as f64;
        let sigma = (chance * (1.0 - chance) / queries).sqrt();
        assert!(
            (hr1 - chance).abs() < 4.0 * sigma + 0.05,
            "hr@1 {hr1} vs chance {chance} over {queries} queries"
        );
    }

    #[test]
    fn generation_eval_reports_text_metrics_on_untrained_model() {
        let world = untrained_world();
        let mut spec = ExperimentSpec::new(
            Family::Explanation,
            EvalSetting::Text,
            vec![id(Family::Explanation, 1)],
        );
        spec.max_new_tokens = Some(12);
        let reports = eval_generation(&ctx(world), &spec).unwrap();
        let report = &reports[0];
        for name in ["rouge-1", "rouge-2", "rouge-l"] {
            let v = report.metrics[name];
            assert!((0.0..=1.0).contains(&v), "{name} out of range: {v}");
        }
        if let Some(bleu) = report.metrics.get("bleu-4") {
            assert!((0.0..=1.0).contains(bleu));
        }
        assert!(report.counts["queries"] > 0);
    }

    #[test]
    fn feature_prompts_skip_data_without_features_and_count_hints() {
        let world = untrained_world();
        // template 3-2 is feature-hinted; synthetic reviews without a
        // feature word must be skipped, not errored
        let mut spec = ExperimentSpec::new(
            Family::Explanation,
            EvalSetting::Text,
            vec![id(Family::Explanation, 2)],
        );
        spec.max_new_tokens = Some(8);
        let reports = eval_generation(&ctx(world), &spec).unwrap();
        let report = &reports[0];
        assert!(report.counts.contains_key("hint_hits"));
        assert_eq!(report.counts["hint_total"], report.counts["queries"]);
    }

    #[test]
    fn review_preference_shares_the_rating_parse_path() {
        let world = untrained_world();
        // template 4-2 targets the rating; scalar setting required
        let spec = ExperimentSpec::new(
            Family::Review,
            EvalSetting::Scalar,
            vec![id(Family::Review, 2)],
        );
        match eval_generation(&ctx(world), &spec) {
            Err(EvalError::TooManyUnparseable { .. }) => {}
            Ok(reports) => {
                assert!(reports[0].metrics.contains_key("rmse"));
            }
            Err(other) => panic!("unexpected failure: {other}"),
        }
        // and the text setting on the same prompt is rejected
        let spec = ExperimentSpec::new(
            Family::Review,
            EvalSetting::Text,
            vec![id(Family::Review, 2)],
        );
        assert!(matches!(
            eval_generation(&ctx(world), &spec),
            Err(EvalError::SettingMismatch { .. })
        ));
    }

    #[test]
    fn eval_reports_are_reproducible() {
        let world = untrained_world();
        let spec = ExperimentSpec::new(
            Family::Sequential,
            EvalSetting::AllItem,
            vec![id(Family::Sequential, 1)],
        );
        let a = eval_sequential(&ctx(world), &spec).unwrap();
        let b = eval_sequential(&ctx(world), &spec).unwrap();
        assert_eq!(a[0].metrics, b[0].metrics);
        assert_eq!(a[0].counts, b[0].counts);
        // a different candidate seed changes direct-eval sampling
        let mut s1 = ExperimentSpec::new(
            Family::Direct,
            EvalSetting::Candidate100,
            vec![id(Family::Direct, 5)],
        );
        s1.candidates = 10;
        let mut s2 = s1.clone();
        s2.seed = 1;
        let r1 = eval_direct(&ctx(world), &s1).unwrap();
        let r1b = eval_direct(&ctx(world), &s1).unwrap();
        let r2 = eval_direct(&ctx(world), &s2).unwrap();
        assert_eq!(r1[0].metrics, r1b[0].metrics);
        // not asserted unequal (could coincide), but the sampling is keyed
        // by seed; just make sure it runs
        assert!(r2[0].metrics.contains_key("hr@1"));
    }

    #[test]
    fn trie_collisions_surface_as_catalog_mismatch() {
        let world = untrained_world();
        // two names that encode identically once truncated to a tiny budget
        let long_a = format!("{}a", "x".repeat(200));
        let long_b = format!("{}b", "x".repeat(200));
        let err = build_item_trie(&world.vocab, 8, &[long_a, long_b]).unwrap_err();
        assert!(matches!(err, EvalError::TrieCatalogMismatch { .. }));
    }

    #[test]
    fn par_map_preserves_order_and_propagates_errors() {
        let items: Vec<usize> = (0..100).collect();
        let out = par_try_map(&items, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        let err = par_try_map(&items, |&i| {
            if i == 63 {
                Err(EvalError::NoQueries {
                    what: "x".to_string(),
                })
            } else {
                Ok(i)
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn random_lists_respect_catalog_chance_formulas() {
        // spot-check the closed forms against direct expectation sums
        let mut rng = datum_rng(3, "chance-formula");
        for _ in 0..50 {
            let m = rng.gen_range(1..=40);
            let k = rng.gen_range(1..=12);
            let expect: f64 = (1..=k.min(m))
                .map(|r| 1.0 / ((r + 1) as f64).log2())
                .sum::<f64>()
                / m as f64;
            assert!((chance_ndcg(k, m) - expect).abs() < 1e-15);
            assert!((chance_hr(k, m) - (k as f64 / m as f64).min(1.0)).abs() < 1e-15);
        }
    }
}
