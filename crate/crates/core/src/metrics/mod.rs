//! Evaluation metrics: rating error (RMSE/MAE), top-k ranking quality
//! (hit ratio, NDCG), and text overlap (BLEU-4, ROUGE-1/2/L).
//!
//! All metrics are pure functions returning values in their natural scale
//! (errors in rating units, everything else in [0, 1]); report formatting
//! and any ×100 scaling happen at the reporting layer. Per-query
//! contributions are summed in a canonical sorted order, which makes every
//! metric bitwise permutation-invariant over its input set.
//!
//! Text metrics lowercase and whitespace-tokenize both sides first. BLEU-4
//! is corpus-level with clipped modified precisions, add-epsilon smoothing
//! (ε = 1e-9) for zero counts, and the standard brevity penalty. ROUGE uses
//! the recall-weighted F-measure with β = 1.2; NDCG is the single-relevant
//! form with ideal DCG 1.

use std::collections::{BTreeMap, BTreeSet};

/// Smoothing epsilon for zero n-gram matches in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Recall weight in the ROUGE F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// Errors raised on malformed metric inputs.
#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {preds} predictions vs {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("k must be at least 1")]
    BadK,
    #[error("rouge order {n} unsupported (only 1 and 2)")]
    BadN { n: usize },
    #[error("query {query:?} ranks item {item:?} more than once")]
    DuplicateItem { query: String, item: String },
    #[error("pair {index} has an empty reference after tokenization")]
    EmptyReference { index: usize },
}

/// One query's ranked candidates plus its single relevant item.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub truth: String,
}

impl RankedList {
    fn validate(&self) -> Result<(), MetricError> {
        if self.truth.is_empty() {
            return Err(MetricError::Empty {
                what: "ground truth",
            });
        }
        let mut seen = BTreeSet::new();
        for item in &self.ranking {
            if !seen.insert(item) {
                return Err(MetricError::DuplicateItem {
                    query: self.query_id.clone(),
                    item: item.clone(),
                });
            }
        }
        Ok(())
    }

    /// 1-based rank of the ground truth, if present.
    fn truth_rank(&self) -> Option<usize> {
        self.ranking.iter().position(|i| i == &self.truth).map(|p| p + 1)
    }
}

/// A generated text with its reference.
#[derive(Debug, Clone)]
pub struct TextPair {
    pub candidate: String,
    pub reference: String,
}

/// Lowercased whitespace tokenization — the fixed policy for text metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

/// Sum in ascending order so the result is independent of input order.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

fn canonical_mean(values: Vec<f64>) -> f64 {
    let n = values.len();
    canonical_sum(values) / n as f64
}

// ---------------------------------------------------------------------------
// Rating metrics
// ---------------------------------------------------------------------------

/// Root mean squared error.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    Ok(mean_error(preds, targets, |d| d * d)?.sqrt())
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    mean_error(preds, targets, f64::abs)
}

fn mean_error(
    preds: &[f64],
    targets: &[f64],
    penalty: impl Fn(f64) -> f64,
) -> Result<f64, MetricError> {
    if preds.len() != targets.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty { what: "predictions" });
    }
    Ok(canonical_mean(
        preds
            .iter()
            .zip(targets)
            .map(|(p, t)| penalty(p - t))
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Ranking metrics
// ---------------------------------------------------------------------------

/// Fraction of queries whose ground truth appears in the top `k`.
pub fn hr_at_k(lists: &[RankedList], k: usize) -> Result<f64, MetricError> {
    ranking_mean(lists, k, |rank| if rank <= k { 1.0 } else { 0.0 })
}

/// Mean of `1 / log₂(rank + 1)` over queries whose ground truth lands in
/// the top `k`, zero otherwise. With one relevant item the ideal DCG is 1,
/// so this is already normalized.
pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> Result<f64, MetricError> {
    ranking_mean(lists, k, |rank| {
        if rank <= k {
            1.0 / ((rank + 1) as f64).log2()
        } else {
            0.0
        }
    })
}

fn ranking_mean(
    lists: &[RankedList],
    k: usize,
    gain: impl Fn(usize) -> f64,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::BadK);
    }
    if lists.is_empty() {
        return Err(MetricError::Empty { what: "query set" });
    }
    let mut gains = Vec::with_capacity(lists.len());
    for list in lists {
        list.validate()?;
        gains.push(list.truth_rank().map_or(0.0, &gain));
    }
    Ok(canonical_mean(gains))
}

// ---------------------------------------------------------------------------
// Text metrics
// ---------------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with n-grams up to 4: geometric mean of clipped
/// modified precisions times the brevity penalty. Zero match counts are
/// smoothed to [`BLEU_EPSILON`]; orders with no candidate n-grams at all
/// contribute the epsilon floor directly.
pub fn bleu4(pairs: &[TextPair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty { what: "text corpus" });
    }
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|p| (tokenize(&p.candidate), tokenize(&p.reference)))
        .collect();
    let candidate_len: usize = tokenized.iter().map(|(c, _)| c.len()).sum();
    let reference_len: usize = tokenized.iter().map(|(_, r)| r.len()).sum();
    if candidate_len == 0 {
        return Err(MetricError::Empty {
            what: "candidate corpus after tokenization",
        });
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=4 {
        let mut matches = 0usize;
        let mut total = 0usize;
        for (candidate, reference) in &tokenized {
            let cand_counts = ngram_counts(candidate, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                total += count;
                matches += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        let precision = if total == 0 {
            BLEU_EPSILON
        } else if matches == 0 {
            BLEU_EPSILON / total as f64
        } else {
            matches as f64 / total as f64
        };
        log_precision_sum += precision.ln();
    }

    let brevity = if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / 4.0).exp())
}

/// Mean ROUGE-n F-measure (β = 1.2) over pairs, n ∈ {1, 2}: clipped n-gram
/// overlap as recall against the reference and precision against the
/// candidate. Pairs whose candidate (or, for n = 2, a one-token side)
/// yields no n-grams contribute zero.
pub fn rouge_n(pairs: &[TextPair], n: usize) -> Result<f64, MetricError> {
    if !(n == 1 || n == 2) {
        return Err(MetricError::BadN { n });
    }
    rouge_mean(pairs, |candidate, reference| {
        let cand_counts = ngram_counts(candidate, n);
        let ref_counts = ngram_counts(reference, n);
        let matches: usize = cand_counts
            .iter()
            .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let cand_total: usize = cand_counts.values().sum();
        let ref_total: usize = ref_counts.values().sum();
        f_measure(matches, cand_total, ref_total)
    })
}

/// Mean ROUGE-L F-measure (β = 1.2) over pairs, from the longest common
/// subsequence of candidate and reference tokens.
pub fn rouge_l(pairs: &[TextPair]) -> Result<f64, MetricError> {
    rouge_mean(pairs, |candidate, reference| {
        let lcs = lcs_len(candidate, reference);
        f_measure(lcs, candidate.len(), reference.len())
    })
}

fn rouge_mean(
    pairs: &[TextPair],
    score: impl Fn(&[String], &[String]) -> f64,
) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty { what: "text corpus" });
    }
    let mut values = Vec::with_capacity(pairs.len());
    for (index, pair) in pairs.iter().enumerate() {
        let reference = tokenize(&pair.reference);
        if reference.is_empty() {
            return Err(MetricError::EmptyReference { index });
        }
        let candidate = tokenize(&pair.candidate);
        values.push(score(&candidate, &reference));
    }
    Ok(canonical_mean(values))
}

/// Recall-weighted F: `(1 + β²)·P·R / (R + β²·P)`, zero when degenerate.
fn f_measure(matches: usize, cand_total: usize, ref_total: usize) -> f64 {
    if matches == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let precision = matches as f64 / cand_total as f64;
    let recall = matches as f64 / ref_total as f64;
    let beta_sq = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision)
}

/// Classic O(n·m) longest-common-subsequence length.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                row[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}
