//! Zero-shot domain transfer: evaluate a model trained on one product
//! domain against data from another, restricted to the users the two
//! domains share, with no training on the target domain.
//!
//! The report covers like/dislike accuracy, rating error, and explanation
//! text quality on the target domain, plus a next-item leg that reports
//! both decoding variants for never-seen item ids: exact-match rate under
//! free greedy decoding, and ranking quality under catalog-constrained
//! decoding. With a one-token-per-id vocabulary the target items have no
//! tokens at all, and the run fails up front with an explicit error —
//! subword identifiers are what make cross-domain transfer expressible.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    build_item_trie, chance_hr, chance_ndcg, decode_text, parse_numeric_raw, par_try_map,
    render_input, require_target_field, EvalError, EvalReport,
};
use crate::corpus::pairs::{
    explanation_eval_data, rating_eval_data, sequential_eval_queries, RatingEvalDatum,
};
use crate::corpus::{item_token, CorpusBundle, PairBuildConfig, SplitTag};
use crate::metrics::{self, RankedList, TextPair};
use crate::model::Model;
use crate::prompts::{PromptError, PromptId, Registry, SplitPolicy};
use crate::search::{constrained_beam, greedy_decode};
use crate::tokenizer::Vocab;
use std::time::Instant;

/// Which prompts probe the target domain, and with what budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSpec {
    pub policy: SplitPolicy,
    /// Rating-family prompt answering "like" / "dislike".
    pub like_prompt: PromptId,
    /// Rating-family prompt answering a grid score.
    pub rating_prompt: PromptId,
    /// Explanation prompt, when the target domain has explanation text.
    pub explanation_prompt: Option<PromptId>,
    /// Next-item prompt for the exact-match / constrained comparison.
    pub sequential_prompt: Option<PromptId>,
    pub beam: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        use crate::prompts::Family;
        TransferSpec {
            policy: SplitPolicy::LastPerFamily,
            like_prompt: PromptId::new(Family::Rating, 9),
            // the held-out templates under the default policy, so the
            // probes are zero-shot prompts as well as a zero-shot domain
            rating_prompt: PromptId::new(Family::Rating, 10),
            explanation_prompt: Some(PromptId::new(Family::Explanation, 12)),
            sequential_prompt: Some(PromptId::new(Family::Sequential, 13)),
            beam: 20,
            max_new_tokens: 24,
            seed: 0,
        }
    }
}

/// Shared-population accounting, reported before any decoding happens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainStats {
    pub shared_users: usize,
    /// Target-domain reviews written by shared users.
    pub target_reviews: usize,
    /// Target-domain interactions by shared users.
    pub target_interactions: usize,
    pub target_items: usize,
}

/// Everything one transfer run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub stats: DomainStats,
    pub like: EvalReport,
    pub rating: EvalReport,
    pub explanation: Option<EvalReport>,
    pub sequential: Option<EvalReport>,
}

/// Target-domain rating data (all splits) restricted to shared users.
fn shared_rating_data(
    target: &CorpusBundle,
    cfg: &PairBuildConfig,
    shared: &BTreeSet<String>,
) -> Result<Vec<RatingEvalDatum>, EvalError> {
    let mut data = Vec::new();
    for tag in [SplitTag::Train, SplitTag::Valid, SplitTag::Test] {
        data.extend(
            rating_eval_data(target, cfg, tag)?
                .into_iter()
                .filter(|d| shared.contains(&d.user_id)),
        );
    }
    Ok(data)
}

/// Evaluate a source-domain model on a target domain over shared users.
pub fn transfer_zero_shot(
    model: &Model,
    vocab: &Vocab,
    registry: &Registry,
    source: &CorpusBundle,
    target: &CorpusBundle,
    pair_cfg: &PairBuildConfig,
    spec: &TransferSpec,
) -> Result<TransferReport, EvalError> {
    let source_users: BTreeSet<String> = source.dataset.users().into_iter().collect();
    let shared: BTreeSet<String> = target
        .dataset
        .users()
        .into_iter()
        .filter(|u| source_users.contains(u))
        .collect();
    if shared.is_empty() {
        return Err(EvalError::NoSharedUsers);
    }

    let stats = DomainStats {
        shared_users: shared.len(),
        target_reviews: target
            .dataset
            .reviews
            .iter()
            .filter(|r| shared.contains(&r.user_id))
            .count(),
        target_interactions: target
            .dataset
            .sequences
            .iter()
            .filter(|s| shared.contains(&s.user_id))
            .map(|s| s.items.len())
            .sum(),
        target_items: target.catalog.len(),
    };

    // a one-token-per-id vocabulary cannot express items it never saw
    if vocab.has_atomic_tokens() {
        for item in &target.catalog {
            let rendered = item_token(item);
            if vocab.atomic_id_for_word(&rendered).is_none() {
                return Err(EvalError::NovelAtomicItem { item: rendered });
            }
        }
    }

    let mut cfg = pair_cfg.clone();
    cfg.seed = spec.seed;
    let registry_split = registry.split_for_pretrain(&spec.policy)?;
    let data = shared_rating_data(target, &cfg, &shared)?;
    if data.is_empty() {
        return Err(EvalError::NoQueries {
            what: "target-domain reviews by shared users".to_string(),
        });
    }

    // -- like / dislike ------------------------------------------------------
    let like_template = registry.get(spec.like_prompt)?;
    require_target_field(like_template, "like_dislike")?;
    let start = Instant::now();
    let outputs = par_try_map(&data, |datum| {
        let input = render_input(like_template, &datum.master)?;
        decode_text(model, vocab, &input, 8)
    })?;
    let mut correct = 0usize;
    let mut unparseable = 0usize;
    for (datum, output) in data.iter().zip(&outputs) {
        match output.trim().to_lowercase().as_str() {
            "like" => correct += usize::from(datum.like),
            "dislike" => correct += usize::from(!datum.like),
            _ => unparseable += 1, // counts as wrong: format failure is failure
        }
    }
    let likes = data.iter().filter(|d| d.like).count();
    let majority = (likes.max(data.len() - likes)) as f64 / data.len() as f64;
    let mut like_report = EvalReport::new(
        spec.like_prompt,
        registry_split.is_pretrain(spec.like_prompt),
    );
    like_report
        .metric("accuracy", correct as f64 / data.len() as f64)
        .metric("majority_share", majority)
        .metric("unparseable_rate", unparseable as f64 / data.len() as f64)
        .count("queries", data.len())
        .count("unparseable", unparseable);
    like_report.runtime_secs = start.elapsed().as_secs_f64();

    // -- rating error ----------------------------------------------------------
    let rating_template = registry.get(spec.rating_prompt)?;
    require_target_field(rating_template, "star_rating")?;
    let start = Instant::now();
    let outputs = par_try_map(&data, |datum| {
        let input = render_input(rating_template, &datum.master)?;
        decode_text(model, vocab, &input, 8)
    })?;
    // the unparseable share is a transfer finding, not a run failure, so
    // the raw parse is used here rather than eval_rating's >50% guard
    let parse = parse_numeric_raw(&outputs);
    let truths: Vec<f64> = data.iter().map(|d| d.truth.as_f64()).collect();
    let mut rating_report = EvalReport::new(
        spec.rating_prompt,
        registry_split.is_pretrain(spec.rating_prompt),
    );
    rating_report
        .metric("rmse", metrics::rmse(&parse.preds, &truths)?)
        .metric("mae", metrics::mae(&parse.preds, &truths)?)
        .metric(
            "unparseable_rate",
            parse.unparseable as f64 / data.len() as f64,
        )
        .count("queries", data.len())
        .count("on_grid", parse.on_grid)
        .count("unparseable", parse.unparseable);
    rating_report.runtime_secs = start.elapsed().as_secs_f64();

    // -- explanation text -------------------------------------------------------
    let explanation = match spec.explanation_prompt {
        None => None,
        Some(id) => {
            let template = registry.get(id)?;
            let mut gen_data = Vec::new();
            for tag in [SplitTag::Train, SplitTag::Valid, SplitTag::Test] {
                let (batch, _) = explanation_eval_data(target, tag);
                gen_data.extend(
                    batch
                        .into_iter()
                        .filter(|d| shared.contains(&d.user_id)),
                );
            }
            let mut usable = Vec::new();
            for datum in gen_data {
                match datum.master.subset_for(template) {
                    Ok(_) => usable.push(datum),
                    Err(PromptError::MissingBinding { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if usable.is_empty() {
                None
            } else {
                let start = Instant::now();
                let outputs = par_try_map(&usable, |datum| {
                    let input = render_input(template, &datum.master)?;
                    decode_text(model, vocab, &input, spec.max_new_tokens)
                })?;
                let pairs: Vec<TextPair> = usable
                    .iter()
                    .zip(&outputs)
                    .map(|(d, o)| TextPair {
                        candidate: o.clone(),
                        reference: d.reference.clone(),
                    })
                    .collect();
                let empty = outputs.iter().filter(|o| o.trim().is_empty()).count();
                let mut report = EvalReport::new(id, registry_split.is_pretrain(id));
                if empty < outputs.len() {
                    report.metric("bleu-4", metrics::bleu4(&pairs)?);
                }
                report
                    .metric("rouge-1", metrics::rouge_n(&pairs, 1)?)
                    .metric("rouge-2", metrics::rouge_n(&pairs, 2)?)
                    .metric("rouge-l", metrics::rouge_l(&pairs)?)
                    .count("queries", usable.len())
                    .count("empty_generations", empty);
                report.runtime_secs = start.elapsed().as_secs_f64();
                Some(report)
            }
        }
    };

    // -- next item, both variants -------------------------------------------------
    let sequential = match spec.sequential_prompt {
        None => None,
        Some(id) => {
            let template = registry.get(id)?;
            require_target_field(template, "target_item")?;
            let (queries, _) = sequential_eval_queries(target, &cfg, SplitTag::Test)?;
            let queries: Vec<_> = queries
                .into_iter()
                .filter(|q| shared.contains(&q.user_id))
                .collect();
            if queries.is_empty() {
                None
            } else {
                let rendered: Vec<String> =
                    target.catalog.iter().map(|i| item_token(i)).collect();
                let trie = build_item_trie(vocab, model.config.max_len, &rendered)?;
                let start = Instant::now();
                let results = par_try_map(&queries, |query| {
                    let input = render_input(template, &query.master)?;
                    let enc = vocab.encode(&input, model.config.max_len)?;
                    let free = greedy_decode(model, &enc, spec.max_new_tokens)?;
                    let exact = vocab.decode(&free.token_ids)? == item_token(&query.target);
                    let ranked = constrained_beam(model, &enc, spec.beam, &trie)?;
                    Ok((
                        exact,
                        RankedList {
                            query_id: query.user_id.clone(),
                            ranking: ranked.into_iter().map(|r| r.item).collect(),
                            truth: item_token(&query.target),
                        },
                    ))
                })?;
                let exact_hits = results.iter().filter(|(e, _)| *e).count();
                let lists: Vec<RankedList> =
                    results.into_iter().map(|(_, l)| l).collect();
                let mut report = EvalReport::new(id, registry_split.is_pretrain(id));
                report
                    .metric("exact_match", exact_hits as f64 / lists.len() as f64)
                    .metric("hr@5", metrics::hr_at_k(&lists, 5)?)
                    .metric("ndcg@5", metrics::ndcg_at_k(&lists, 5)?)
                    .metric("chance_hr@5", chance_hr(5, rendered.len()))
                    .metric("chance_ndcg@5", chance_ndcg(5, rendered.len()))
                    .count("queries", lists.len())
                    .count("catalog_size", rendered.len());
                report.runtime_secs = start.elapsed().as_secs_f64();
                Some(report)
            }
        }
    };

    Ok(TransferReport {
        stats,
        like: like_report,
        rating: rating_report,
        explanation,
        sequential,
    })
}
