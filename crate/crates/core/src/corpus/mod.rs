//! Raw recommendation data and the protocols that turn it into text pairs.
//!
//! Two record kinds feed everything: reviews (user, item, score, text) and
//! per-user time-ordered interaction sequences. This module owns their file
//! formats, the evaluation splits (ratio split with coverage for ratings,
//! leave-one-out for sequences), negative sampling, rating discretization
//! onto a tenths grid, prompt-pair construction, and a synthetic dataset
//! generator with a planted, checkable next-item rule.

pub mod files;
pub mod pairs;
pub mod sampling;
pub mod split;
pub mod synth;

pub use files::{read_reviews, read_sequences, write_reviews, write_sequences};
pub use pairs::{PairBuildConfig, PairBuildReport, TrainingPair};
pub use sampling::{perturb_rating, sample_negatives, RatingTenths};
pub use split::{split_rating, split_sequential, RatingSplit, SeqSplit, SplitRatios};
pub use synth::{generate_synthetic, PlantedRule, SynthReport, SynthSpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Errors raised by data loading, splitting, sampling, and pair building.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: bad record: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing or malformed format header (expected {expected:?})")]
    BadHeader { expected: String },
    #[error("unsupported format {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("record {index}: rating {rating} outside 1..=5")]
    RatingOutOfRange { index: usize, rating: u8 },
    #[error("record {index}: empty {field}")]
    EmptyField { index: usize, field: &'static str },
    #[error("sequence for user {user:?} is empty")]
    EmptySequence { user: String },
    #[error("split ratios {ratios:?} must be positive and sum to 1")]
    BadRatios { ratios: [f64; 3] },
    #[error("cannot split {n} records into three non-empty subsets")]
    TooFewRecords { n: usize },
    #[error("negative pool exhausted: need {needed}, only {available} non-interacted items")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("rating sigma must be non-negative and finite, got {sigma}")]
    BadSigma { sigma: f64 },
    #[error("sample fraction must lie in (0, 1], got {fraction}")]
    BadFraction { fraction: f64 },
    #[error("synthetic spec infeasible: {reason}")]
    InfeasibleSpec { reason: String },
    #[error("dataset has no {what}")]
    NoData { what: &'static str },
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
}

/// One review record: the score plus the texts hanging off it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    /// Integer score, 1..=5.
    pub rating: u8,
    pub review_text: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_word: Option<String>,
    pub timestamp: u64,
}

/// One user's time-ordered item interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

/// A loaded dataset: reviews plus interaction sequences.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub reviews: Vec<RawReview>,
    pub sequences: Vec<InteractionSequence>,
}

impl Dataset {
    /// Validate every record; errors carry the offending index.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (index, r) in self.reviews.iter().enumerate() {
            if !(1..=5).contains(&r.rating) {
                return Err(CorpusError::RatingOutOfRange {
                    index,
                    rating: r.rating,
                });
            }
            if r.user_id.is_empty() {
                return Err(CorpusError::EmptyField {
                    index,
                    field: "user_id",
                });
            }
            if r.item_id.is_empty() {
                return Err(CorpusError::EmptyField {
                    index,
                    field: "item_id",
                });
            }
        }
        for s in &self.sequences {
            if s.items.is_empty() {
                return Err(CorpusError::EmptySequence {
                    user: s.user_id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Every distinct item id, across reviews and sequences, sorted.
    pub fn catalog(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.reviews {
            set.insert(r.item_id.clone());
        }
        for s in &self.sequences {
            for i in &s.items {
                set.insert(i.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Every distinct user id, sorted.
    pub fn users(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.reviews {
            set.insert(r.user_id.clone());
        }
        for s in &self.sequences {
            set.insert(s.user_id.clone());
        }
        set.into_iter().collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.users().len();
        let items = self.catalog().len();
        let reviews = self.reviews.len();
        let interactions: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        let density = if users == 0 || items == 0 {
            0.0
        } else {
            reviews as f64 / (users as f64 * items as f64)
        };
        DatasetStats {
            users,
            items,
            reviews,
            sequences: self.sequences.len(),
            interactions,
            density,
        }
    }
}

/// Dataset-level counts reported by ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub reviews: usize,
    pub sequences: usize,
    pub interactions: usize,
    /// reviews / (users * items); the complement of sparsity.
    pub density: f64,
}

/// Which evaluation split a derived artifact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => f.write_str("train"),
            SplitTag::Valid => f.write_str("valid"),
            SplitTag::Test => f.write_str("test"),
        }
    }
}

/// A dataset together with its computed protocol splits.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub dataset: Dataset,
    pub rating_split: RatingSplit,
    pub seq_splits: Vec<SeqSplit>,
    /// Sequences shorter than 3 items, excluded from leave-one-out.
    pub skipped_sequences: usize,
    /// Sorted item catalog, shared by negative sampling and decoding tries.
    pub catalog: Vec<String>,
}

impl CorpusBundle {
    /// Split a validated dataset with the standard protocols.
    pub fn prepare(dataset: Dataset, ratios: SplitRatios, seed: u64) -> Result<Self, CorpusError> {
        dataset.validate()?;
        if dataset.reviews.is_empty() {
            return Err(CorpusError::NoData { what: "reviews" });
        }
        let rating_split = split_rating(&dataset.reviews, ratios, seed)?;
        let (seq_splits, skipped_sequences) = split_sequential(&dataset.sequences);
        let catalog = dataset.catalog();
        Ok(CorpusBundle {
            dataset,
            rating_split,
            seq_splits,
            skipped_sequences,
            catalog,
        })
    }

    /// All items a user has interacted with (sequence items and reviewed
    /// items), used to exclude them from negative pools.
    pub fn interacted(&self, user_id: &str) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for s in &self.dataset.sequences {
            if s.user_id == user_id {
                set.extend(s.items.iter().cloned());
            }
        }
        for r in &self.dataset.reviews {
            if r.user_id == user_id {
                set.insert(r.item_id.clone());
            }
        }
        set
    }
}

/// Render an item id the way prompts show it.
pub fn item_token(item_id: &str) -> String {
    format!("item_{item_id}")
}

/// Derive a per-datum RNG stream from a run seed and a stable key, so that
/// record-level randomness does not depend on processing order.
pub fn datum_rng(seed: u64, key: &str) -> rand_chacha::ChaCha20Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    rand_chacha::ChaCha20Rng::from_seed(seed_bytes)
}
