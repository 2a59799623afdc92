//! Byte-pair-merge vocabulary training.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    byte_token_id, marked_word, TokenizerError, Vocab, BYTE_COUNT, MIN_VOCAB_SIZE, SPECIAL_COUNT,
};

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    pub target_size: usize,
    pub final_size: usize,
    pub merges_learned: usize,
    pub distinct_words: usize,
    pub total_word_occurrences: u64,
}

/// Train a vocabulary by greedy byte-pair merging.
///
/// Words (whitespace-separated, marker-prefixed) are decomposed into bytes;
/// the most frequent adjacent token pair is merged into a new token until the
/// vocabulary reaches `target_size` or no pair repeats. Frequency ties are
/// broken by the lexicographically smallest pair of token byte strings, so
/// training is deterministic. The base alphabet (all 256 bytes) always stays
/// in the vocabulary, which keeps every possible text encodable.
pub fn train<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<(Vocab, TrainStats), TokenizerError> {
    train_with_reserved(corpus, target_size, &[] as &[&str])
}

/// Like [`train`], but no merge may complete any of the `reserved` words.
///
/// The exact byte string of a reserved word never becomes a single learned
/// token, no matter how frequent the word is, leaving it free to be added
/// afterwards as a dedicated whole-word token. Reserved words still shape
/// training normally otherwise — their prefixes and fragments can merge.
pub fn train_with_reserved<'a, S: AsRef<str>>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    reserved: &[S],
) -> Result<(Vocab, TrainStats), TokenizerError> {
    let reserved: BTreeSet<Vec<u8>> =
        reserved.iter().map(|w| marked_word(w.as_ref())).collect();
    if target_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
        });
    }

    // word frequency table over marked words
    let mut word_freq: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut total_words: u64 = 0;
    for text in corpus {
        for word in text.split_whitespace() {
            *word_freq.entry(marked_word(word)).or_insert(0) += 1;
            total_words += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // base vocabulary: special placeholders then the byte alphabet
    let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); SPECIAL_COUNT];
    for b in 0..BYTE_COUNT {
        tokens.push(vec![b as u8]);
    }

    // each distinct word as a mutable token-id sequence
    let mut words: Vec<(Vec<usize>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| (w.iter().map(|&b| byte_token_id(b)).collect(), f))
        .collect();

    let mut merges: Vec<(usize, usize, usize)> = Vec::new();
    while tokens.len() < target_size {
        // count adjacent pairs, weighted by word frequency
        let mut pair_freq: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (ids, freq) in &words {
            for pair in ids.windows(2) {
                *pair_freq.entry((pair[0], pair[1])).or_insert(0) += freq;
            }
        }
        // best pair: highest frequency, ties by smallest (left, right) bytes
        let best = pair_freq
            .iter()
            .filter(|&(&(l, r), &f)| {
                if f < 2 {
                    return false;
                }
                if reserved.is_empty() {
                    return true;
                }
                let mut fused = tokens[l].clone();
                fused.extend_from_slice(&tokens[r]);
                !reserved.contains(&fused)
            })
            .max_by(|(&(l1, r1), &f1), (&(l2, r2), &f2)| {
                f1.cmp(&f2).then_with(|| {
                    // reversed so that the *smaller* byte pair wins the max
                    (&tokens[l2], &tokens[r2]).cmp(&(&tokens[l1], &tokens[r1]))
                })
            })
            .map(|(&pair, _)| pair);
        let Some((left, right)) = best else {
            break; // no pair repeats; further merges would be pointless
        };

        let mut merged_bytes = tokens[left].clone();
        merged_bytes.extend_from_slice(&tokens[right]);
        let merged_id = tokens.len();
        tokens.push(merged_bytes);
        merges.push((left, right, merged_id));

        // rewrite every word, fusing occurrences left to right
        for (ids, _) in &mut words {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }

    let stats = TrainStats {
        target_size,
        final_size: tokens.len(),
        merges_learned: merges.len(),
        distinct_words: word_freq.len(),
        total_word_occurrences: total_words,
    };
    Ok((Vocab::from_parts(tokens, merges), stats))
}
