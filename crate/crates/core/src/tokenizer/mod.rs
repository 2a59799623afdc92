//! Subword tokenizer with whole-word tracking.
//!
//! The vocabulary is built by byte-pair merging: words are split on
//! whitespace, each word is prefixed with a space marker and decomposed into
//! bytes, and the most frequent adjacent token pair is merged repeatedly
//! until the target size is reached. All 256 single bytes stay in the
//! vocabulary, so any text is representable and the unknown token is never
//! needed on the encode path.
//!
//! Encoding also assigns every token a *whole-word id*: the 1-based index of
//! the whitespace word the token came from. Sub-word pieces of one word share
//! an id, which lets the model treat a multi-piece identifier such as
//! `item_7391` as one field. The trailing end-of-sequence token carries
//! whole-word id 0.
//!
//! An optional atomic-token extension maps chosen whole words (user and item
//! identifiers) to dedicated single tokens.

mod bpe;

pub use bpe::TrainStats;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Format tag for serialized vocabularies.
pub const VOCAB_FORMAT: &str = "subword-vocab/v1";

/// Marker byte glued to the front of every whitespace word before byte-pair
/// decomposition. Using the space byte itself makes decoding a plain
/// concatenation.
pub(crate) const WORD_MARKER: u8 = b' ';

/// Number of reserved special tokens (pad, eos, unk).
pub const SPECIAL_COUNT: usize = 3;
/// Number of single-byte base tokens, always present.
pub const BYTE_COUNT: usize = 256;
/// Smallest legal vocabulary: specials plus the byte alphabet.
pub const MIN_VOCAB_SIZE: usize = SPECIAL_COUNT + BYTE_COUNT;

/// Errors raised by vocabulary construction, encoding, and decoding.
#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is below the minimum {MIN_VOCAB_SIZE} (specials + byte alphabet)")]
    TargetTooSmall { target: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} is out of range for vocabulary of size {size}")]
    UnknownId { id: usize, size: usize },
    #[error("atomic token {token:?} collides with an existing vocabulary entry")]
    AtomicCollision { token: String },
    #[error("atomic token {token:?} supplied twice")]
    AtomicDuplicate { token: String },
    #[error("atomic token {token:?} contains whitespace; atomic tokens must be single words")]
    AtomicNotAWord { token: String },
    #[error("max_len {max_len} is too small to hold any content (need at least 2)")]
    MaxLenTooSmall { max_len: usize },
    #[error("failed to read vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse vocabulary file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported vocabulary format tag {found:?} (expected {VOCAB_FORMAT:?})")]
    Version { found: String },
    #[error("vocabulary file is internally inconsistent: {reason}")]
    Corrupt { reason: String },
}

/// Special token ids, fixed for every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials;

impl Specials {
    pub const PAD: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;
}

/// A tokenized text: token ids plus the whole-word id of every position.
///
/// `whole_word_ids` is parallel to `token_ids`. Ids of word tokens are
/// 1-based and non-decreasing, incrementing exactly at whitespace-word
/// boundaries of the source text; the trailing end-of-sequence token (and any
/// padding) carries id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub whole_word_ids: Vec<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// A byte-pair-merge subword vocabulary.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Vocab {
    /// Token byte strings, indexed by id. The first `SPECIAL_COUNT` entries
    /// are placeholders for pad/eos/unk and decode to nothing.
    tokens: Vec<Vec<u8>>,
    /// Learned merges in training order: (left id, right id) -> merged id.
    merges: Vec<(usize, usize, usize)>,
    /// Merge lookup: (left, right) -> rank (position in `merges`).
    merge_rank: BTreeMap<(usize, usize), usize>,
    /// Token bytes -> id, for atomic lookup and collision checks.
    token_ids: BTreeMap<Vec<u8>, usize>,
    /// Ids of atomic whole-word tokens added by `extend_with_atomic_ids`.
    atomic: BTreeMap<Vec<u8>, usize>,
}

impl Vocab {
    /// Train a vocabulary on a text corpus. See [`bpe::train`].
    pub fn train<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        target_size: usize,
    ) -> Result<(Vocab, TrainStats), TokenizerError> {
        bpe::train(corpus, target_size)
    }

    /// Train while keeping the `reserved` words available for later
    /// registration as dedicated tokens. See [`bpe::train_with_reserved`].
    pub fn train_with_reserved<'a, S: AsRef<str>>(
        corpus: impl IntoIterator<Item = &'a str>,
        target_size: usize,
        reserved: &[S],
    ) -> Result<(Vocab, TrainStats), TokenizerError> {
        bpe::train_with_reserved(corpus, target_size, reserved)
    }

    pub(crate) fn from_parts(
        tokens: Vec<Vec<u8>>,
        merges: Vec<(usize, usize, usize)>,
    ) -> Vocab {
        let mut token_ids = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(SPECIAL_COUNT) {
            token_ids.insert(tok.clone(), id);
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, &(l, r, _))| ((l, r), rank))
            .collect();
        Vocab {
            tokens,
            merges,
            merge_rank,
            token_ids,
            atomic: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of learned merges.
    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// True if atomic tokens have been added.
    pub fn has_atomic_tokens(&self) -> bool {
        !self.atomic.is_empty()
    }

    /// The display form of one token (specials shown as tags).
    pub fn token_text(&self, id: usize) -> Result<String, TokenizerError> {
        match id {
            Specials::PAD => Ok("<pad>".to_string()),
            Specials::EOS => Ok("<eos>".to_string()),
            Specials::UNK => Ok("<unk>".to_string()),
            _ if id < self.tokens.len() => {
                Ok(String::from_utf8_lossy(&self.tokens[id]).into_owned())
            }
            _ => Err(TokenizerError::UnknownId {
                id,
                size: self.tokens.len(),
            }),
        }
    }

    /// Whether a whole word (as it would appear between whitespace) has an
    /// atomic token, and if so which id.
    pub fn atomic_id_for_word(&self, word: &str) -> Option<usize> {
        let marked = marked_word(word);
        self.atomic.get(&marked).copied()
    }

    /// Register one dedicated token per supplied word.
    ///
    /// Intended for user and item identifiers: afterwards each listed word
    /// encodes to exactly one token. The vocabulary grows by exactly
    /// `words.len()`. Fails on duplicates, on collision with an existing
    /// token, and on words containing whitespace.
    pub fn extend_with_atomic_ids<S: AsRef<str>>(
        &mut self,
        words: &[S],
    ) -> Result<(), TokenizerError> {
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.split_whitespace().count() != 1 || w.trim() != w {
                return Err(TokenizerError::AtomicNotAWord {
                    token: w.to_string(),
                });
            }
            let marked = marked_word(w);
            if self.token_ids.contains_key(&marked) {
                return Err(TokenizerError::AtomicCollision {
                    token: w.to_string(),
                });
            }
            let id = self.tokens.len();
            self.tokens.push(marked.clone());
            self.token_ids.insert(marked.clone(), id);
            if self.atomic.insert(marked, id).is_some() {
                return Err(TokenizerError::AtomicDuplicate {
                    token: w.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Tokenize one marked word (marker byte + word bytes) into ids.
    pub(crate) fn encode_marked_word(&self, marked: &[u8]) -> Vec<usize> {
        if let Some(&id) = self.atomic.get(marked) {
            return vec![id];
        }
        // start from single bytes, then apply merges in training order:
        // repeatedly find the lowest-rank adjacent pair and fuse every
        // occurrence left to right.
        let mut ids: Vec<usize> = marked.iter().map(|&b| byte_token_id(b)).collect();
        loop {
            let mut best: Option<(usize, (usize, usize))> = None;
            for pair in ids.windows(2) {
                let key = (pair[0], pair[1]);
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, key));
                    }
                }
            }
            let Some((rank, (left, right))) = best else {
                break;
            };
            let merged = self.merges[rank].2;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Encode text into token ids and whole-word ids.
    ///
    /// Words are whitespace-separated; each word's sub-word tokens share a
    /// 1-based whole-word id. The sequence is truncated at the tail to leave
    /// room for the end-of-sequence token, which is always appended and
    /// carries whole-word id 0. `max_len` bounds the total length.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<EncodedSequence, TokenizerError> {
        if max_len < 2 {
            return Err(TokenizerError::MaxLenTooSmall { max_len });
        }
        let mut token_ids = Vec::new();
        let mut whole_word_ids = Vec::new();
        'outer: for (word_idx, word) in text.split_whitespace().enumerate() {
            let marked = marked_word(word);
            for id in self.encode_marked_word(&marked) {
                if token_ids.len() == max_len - 1 {
                    break 'outer;
                }
                token_ids.push(id);
                whole_word_ids.push(word_idx + 1);
            }
        }
        token_ids.push(Specials::EOS);
        whole_word_ids.push(0);
        debug_assert!(token_ids.len() <= max_len);
        Ok(EncodedSequence {
            token_ids,
            whole_word_ids,
        })
    }

    /// Decode token ids back into text. Specials decode to nothing; an
    /// out-of-range id is an error.
    pub fn decode(&self, token_ids: &[usize]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in token_ids {
            if id >= self.tokens.len() {
                return Err(TokenizerError::UnknownId {
                    id,
                    size: self.tokens.len(),
                });
            }
            if id < SPECIAL_COUNT {
                continue;
            }
            bytes.extend_from_slice(&self.tokens[id]);
        }
        let mut text = String::from_utf8_lossy(&bytes).into_owned();
        if text.starts_with(' ') {
            text.remove(0);
        }
        Ok(text)
    }

    /// SHA-256 over the canonical serialization; checkpoints embed this to
    /// refuse mismatched vocabularies.
    pub fn content_hash(&self) -> String {
        let file = self.to_file();
        let json = serde_json::to_vec(&file).expect("vocab serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex::encode(hasher.finalize())
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            format: VOCAB_FORMAT.to_string(),
            tokens: self
                .tokens
                .iter()
                .skip(SPECIAL_COUNT)
                .map(|t| hex::encode(t))
                .collect(),
            merges: self
                .merges
                .iter()
                .map(|&(l, r, m)| vec![l, r, m])
                .collect(),
            atomic_ids: self.atomic.values().copied().collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Vocab, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.format != VOCAB_FORMAT {
            return Err(TokenizerError::Version {
                found: file.format,
            });
        }
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); SPECIAL_COUNT];
        for hex_tok in &file.tokens {
            let bytes = hex::decode(hex_tok).map_err(|e| TokenizerError::Corrupt {
                reason: format!("bad hex token {hex_tok:?}: {e}"),
            })?;
            tokens.push(bytes);
        }
        if tokens.len() < MIN_VOCAB_SIZE {
            return Err(TokenizerError::Corrupt {
                reason: format!("only {} tokens, need at least {MIN_VOCAB_SIZE}", tokens.len()),
            });
        }
        for (i, tok) in tokens.iter().enumerate().skip(SPECIAL_COUNT).take(BYTE_COUNT) {
            let expected = (i - SPECIAL_COUNT) as u8;
            if tok.as_slice() != [expected] {
                return Err(TokenizerError::Corrupt {
                    reason: format!("byte token {i} is not byte {expected}"),
                });
            }
        }
        let mut merges = Vec::with_capacity(file.merges.len());
        for m in &file.merges {
            if m.len() != 3 || m[0] >= tokens.len() || m[1] >= tokens.len() || m[2] >= tokens.len()
            {
                return Err(TokenizerError::Corrupt {
                    reason: format!("bad merge record {m:?}"),
                });
            }
            merges.push((m[0], m[1], m[2]));
        }
        let mut vocab = Vocab::from_parts(tokens, merges);
        for id in file.atomic_ids {
            if id >= vocab.tokens.len() {
                return Err(TokenizerError::Corrupt {
                    reason: format!("atomic id {id} out of range"),
                });
            }
            vocab.atomic.insert(vocab.tokens[id].clone(), id);
        }
        Ok(vocab)
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Vocab({} tokens, {} merges, {} atomic)",
            self.size(),
            self.merge_count(),
            self.atomic.len()
        )
    }
}

/// Id of the base token for one byte.
pub(crate) fn byte_token_id(b: u8) -> usize {
    SPECIAL_COUNT + b as usize
}

/// A word as fed to byte-pair merging: marker byte + word bytes.
pub(crate) fn marked_word(word: &str) -> Vec<u8> {
    let mut v = Vec::with_capacity(word.len() + 1);
    v.push(WORD_MARKER);
    v.extend_from_slice(word.as_bytes());
    v
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    format: String,
    /// Hex-encoded token byte strings, ids starting at `SPECIAL_COUNT`.
    tokens: Vec<String>,
    /// (left, right, merged) id triples in training order.
    merges: Vec<Vec<usize>>,
    /// Ids that are atomic whole-word tokens.
    atomic_ids: Vec<usize>,
}
