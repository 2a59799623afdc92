//! Synthetic dataset generation with a planted next-item rule.
//!
//! Generated data is small enough to train on a laptop yet structured enough
//! that every task family has learnable signal:
//! - sequences follow a deterministic next-item rule, so a trained model can
//!   be scored against ground truth and the rule itself can be checked;
//! - ratings are a fixed function of item quality and a per-user habit;
//! - review text, summary, explanation, and feature word are all derived
//!   from (item, rating) with fixed templates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{datum_rng, CorpusError, Dataset, InteractionSequence, RawReview};

/// Deterministic next-item rules. Items are indices `0..items`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlantedRule {
    /// `next = (prev + step) mod items`
    Successor { step: usize },
    /// `next = (prev + prev2) mod items`
    LastTwoSum,
}

impl PlantedRule {
    /// The item that must follow the given history. Needs at least two
    /// items of context (the first two items of a sequence are free).
    pub fn next(&self, items: usize, history: &[usize]) -> Option<usize> {
        let n = history.len();
        if n < 2 || items == 0 {
            return None;
        }
        Some(match self {
            PlantedRule::Successor { step } => (history[n - 1] + step) % items,
            PlantedRule::LastTwoSum => (history[n - 1] + history[n - 2]) % items,
        })
    }

    pub fn describe(&self, items: usize) -> String {
        match self {
            PlantedRule::Successor { step } => {
                format!("next = (previous + {step}) mod {items}")
            }
            PlantedRule::LastTwoSum => {
                format!("next = (previous + one before previous) mod {items}")
            }
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub rule: PlantedRule,
    /// Reviews written per user (drawn from their history prefix).
    pub reviews_per_user: usize,
    /// Item ids are `item_id_offset .. item_id_offset + items`; a non-zero
    /// offset yields a catalog disjoint from the default, for transfer
    /// experiments.
    #[serde(default)]
    pub item_id_offset: usize,
    /// Prefix for user ids (two domains with the same prefix and user count
    /// share their user population).
    #[serde(default = "default_user_prefix")]
    pub user_prefix: String,
}

fn default_user_prefix() -> String {
    "u".to_string()
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 200,
            items: 20,
            seq_len_min: 8,
            seq_len_max: 12,
            rule: PlantedRule::LastTwoSum,
            reviews_per_user: 3,
            item_id_offset: 0,
            user_prefix: default_user_prefix(),
        }
    }
}

/// What the generator produced, including the rule in checkable form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthReport {
    pub spec: SynthSpec,
    pub seed: u64,
    pub rule_description: String,
    pub users: usize,
    pub items: usize,
    pub reviews: usize,
    pub interactions: usize,
}

const FEATURES: [&str; 8] = [
    "quality", "battery", "fabric", "flavor", "design", "price", "comfort", "durability",
];

/// Per-user rating habit, a stable function of the user id alone so two
/// generated domains share habits for shared users.
fn user_habit(user_id: &str) -> i8 {
    let mut rng = datum_rng(0x4861_6269, &format!("habit/{user_id}"));
    [-1i8, 0, 1][rng.gen_range(0..3)]
}

fn item_quality(item_index: usize) -> u8 {
    (item_index % 5) as u8 + 1
}

fn adjective(rating: u8) -> &'static str {
    match rating {
        1 | 2 => "poor",
        3 => "acceptable",
        _ => "great",
    }
}

/// Generate a dataset whose sequences follow the planted rule.
pub fn generate_synthetic(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(Dataset, SynthReport), CorpusError> {
    let infeasible = |reason: String| CorpusError::InfeasibleSpec { reason };
    if spec.users == 0 {
        return Err(infeasible("zero users".to_string()));
    }
    if spec.items < 2 {
        return Err(infeasible(format!("{} items, need at least 2", spec.items)));
    }
    if spec.seq_len_min < 3 {
        return Err(infeasible(format!(
            "seq_len_min {} below 3; leave-one-out needs 3 items",
            spec.seq_len_min
        )));
    }
    if spec.seq_len_max < spec.seq_len_min {
        return Err(infeasible(format!(
            "seq_len_max {} below seq_len_min {}",
            spec.seq_len_max, spec.seq_len_min
        )));
    }
    if spec.items < spec.seq_len_max {
        return Err(infeasible(format!(
            "{} items cannot support sequences of length {}",
            spec.items, spec.seq_len_max
        )));
    }

    let item_id = |index: usize| format!("{}", spec.item_id_offset + index);
    let mut sequences = Vec::with_capacity(spec.users);
    let mut reviews = Vec::new();
    let mut timestamp = 0u64;

    for u in 0..spec.users {
        let user_id = format!("{}{u}", spec.user_prefix);
        let mut rng = datum_rng(seed, &format!("seq/{user_id}/{}", spec.item_id_offset));
        let len = rng.gen_range(spec.seq_len_min..=spec.seq_len_max);
        // first item sweeps the catalog deterministically so that with
        // users >= items every item occurs in the data (negative pools and
        // candidate sets need a full catalog); the second is free
        let mut indices = vec![u % spec.items, rng.gen_range(0..spec.items)];
        while indices.len() < len {
            let next = spec
                .rule
                .next(spec.items, &indices)
                .expect("history has >= 2 items");
            indices.push(next);
        }
        let items: Vec<String> = indices.iter().map(|&i| item_id(i)).collect();

        // reviews over the history prefix (never the held-out last two)
        let habit = user_habit(&user_id);
        let prefix = &indices[..indices.len() - 2];
        let review_count = spec.reviews_per_user.min(prefix.len());
        let mut chosen: Vec<usize> = prefix.to_vec();
        // Fisher-Yates prefix shuffle, then dedupe picks by item
        for i in 0..review_count.min(chosen.len()) {
            let j = rng.gen_range(i..chosen.len());
            chosen.swap(i, j);
        }
        let mut seen = std::collections::BTreeSet::new();
        for &idx in chosen.iter().take(review_count) {
            if !seen.insert(idx) {
                continue;
            }
            let rating = (i16::from(item_quality(idx)) + i16::from(habit)).clamp(1, 5) as u8;
            let feature = FEATURES[idx % FEATURES.len()];
            let adj = adjective(rating);
            reviews.push(RawReview {
                user_id: user_id.clone(),
                item_id: item_id(idx),
                rating,
                review_text: format!(
                    "i think the {feature} of this item is {adj} and i would rate it {rating} stars"
                ),
                summary: format!("{adj} {feature}"),
                explanation: Some(format!("the {feature} is {adj}")),
                feature_word: Some(feature.to_string()),
                timestamp,
            });
            timestamp += 1;
        }

        sequences.push(InteractionSequence { user_id, items });
    }

    if reviews.is_empty() {
        return Err(infeasible(
            "spec produced no reviews; raise reviews_per_user or sequence length".to_string(),
        ));
    }

    let dataset = Dataset {
        reviews,
        sequences,
    };
    dataset.validate()?;
    let report = SynthReport {
        spec: spec.clone(),
        seed,
        rule_description: spec.rule.describe(spec.items),
        users: spec.users,
        items: spec.items,
        reviews: dataset.reviews.len(),
        interactions: dataset.sequences.iter().map(|s| s.items.len()).sum(),
    };
    Ok((dataset, report))
}

/// Check every generated sequence against the rule (test oracle; also used
/// by the synthetic-data self check in the CLI).
pub fn verify_rule(dataset: &Dataset, spec: &SynthSpec) -> Result<(), String> {
    for seq in &dataset.sequences {
        let indices: Vec<usize> = seq
            .items
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| format!("non-numeric item id {s:?}"))
                    .and_then(|i| {
                        i.checked_sub(spec.item_id_offset)
                            .ok_or_else(|| format!("item id {i} below offset"))
                    })
            })
            .collect::<Result<_, _>>()?;
        for t in 2..indices.len() {
            let expected = spec
                .rule
                .next(spec.items, &indices[..t])
                .expect("at least 2 items of context");
            if indices[t] != expected {
                return Err(format!(
                    "user {}: position {t} is {} but the rule demands {expected}",
                    seq.user_id, indices[t]
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_arithmetic_examples() {
        assert_eq!(PlantedRule::Successor { step: 1 }.next(20, &[4, 7]), Some(8));
        assert_eq!(PlantedRule::Successor { step: 3 }.next(20, &[4, 19]), Some(2));
        assert_eq!(PlantedRule::LastTwoSum.next(20, &[12, 13]), Some(5));
        assert_eq!(PlantedRule::LastTwoSum.next(20, &[0, 0]), Some(0));
        assert_eq!(PlantedRule::LastTwoSum.next(20, &[7]), None);
    }

    #[test]
    fn generated_sequences_obey_the_rule() {
        for rule in [PlantedRule::Successor { step: 1 }, PlantedRule::LastTwoSum] {
            let spec = SynthSpec {
                users: 40,
                rule,
                ..SynthSpec::default()
            };
            let (ds, report) = generate_synthetic(&spec, 11).unwrap();
            verify_rule(&ds, &spec).unwrap();
            assert_eq!(report.users, 40);
            assert_eq!(ds.sequences.len(), 40);
            for s in &ds.sequences {
                assert!(s.items.len() >= spec.seq_len_min);
                assert!(s.items.len() <= spec.seq_len_max);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec::default();
        let (a, _) = generate_synthetic(&spec, 5).unwrap();
        let (b, _) = generate_synthetic(&spec, 5).unwrap();
        let (c, _) = generate_synthetic(&spec, 6).unwrap();
        assert_eq!(a.reviews, b.reviews);
        assert_eq!(a.sequences, b.sequences);
        assert_ne!(
            a.sequences, c.sequences,
            "different seeds should differ somewhere"
        );
    }

    #[test]
    fn reviews_use_only_history_prefix_items() {
        let spec = SynthSpec::default();
        let (ds, _) = generate_synthetic(&spec, 3).unwrap();
        for r in &ds.reviews {
            let seq = ds
                .sequences
                .iter()
                .find(|s| s.user_id == r.user_id)
                .expect("review user has a sequence");
            let prefix = &seq.items[..seq.items.len() - 2];
            assert!(
                prefix.contains(&r.item_id),
                "review item {} not in history prefix of {}",
                r.item_id,
                r.user_id
            );
        }
    }

    #[test]
    fn ratings_follow_quality_plus_habit() {
        let spec = SynthSpec::default();
        let (ds, _) = generate_synthetic(&spec, 3).unwrap();
        for r in &ds.reviews {
            let idx: usize = r.item_id.parse().unwrap();
            let expected =
                (i16::from(item_quality(idx)) + i16::from(user_habit(&r.user_id))).clamp(1, 5)
                    as u8;
            assert_eq!(r.rating, expected);
            // texts are consistent with the rating
            assert!(r.review_text.contains(adjective(r.rating)));
            assert!(r.summary.contains(adjective(r.rating)));
        }
    }

    #[test]
    fn habits_are_shared_across_domains() {
        let source = SynthSpec::default();
        let target = SynthSpec {
            item_id_offset: 1000,
            ..SynthSpec::default()
        };
        let (a, _) = generate_synthetic(&source, 1).unwrap();
        let (b, _) = generate_synthetic(&target, 2).unwrap();
        // same user populations
        let ua: Vec<&String> = a.sequences.iter().map(|s| &s.user_id).collect();
        let ub: Vec<&String> = b.sequences.iter().map(|s| &s.user_id).collect();
        assert_eq!(ua, ub);
        // catalogs are disjoint
        let ca = a.catalog();
        let cb = b.catalog();
        assert!(ca.iter().all(|i| !cb.contains(i)));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let too_short = SynthSpec {
            seq_len_min: 2,
            seq_len_max: 2,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&too_short, 1).is_err());
        let too_few_items = SynthSpec {
            items: 5,
            seq_len_min: 6,
            seq_len_max: 8,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&too_few_items, 1),
            Err(CorpusError::InfeasibleSpec { .. })
        ));
        let no_users = SynthSpec {
            users: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&no_users, 1).is_err());
    }
}
