//! The encoder–decoder sequence model.
//!
//! Inputs are encoded token sequences whose representation is the sum of
//! three embeddings — token, position, and whole-word — so that multi-piece
//! identifiers (user and item ids) share one whole-word vector. A
//! bidirectional pre-norm encoder contextualizes the input; an
//! autoregressive decoder with causal self-attention and cross-attention
//! produces token logits through an untied output projection. The training
//! objective is the summed negative log-likelihood of the target tokens.
//!
//! All math is double-precision with hand-written backward passes; every
//! parameter is reachable through a stable name visitor, which is what the
//! optimizer, the checkpoint format, and the gradient audit build on.

pub mod checkpoint;
pub mod layers;
pub mod params;

pub use layers::DropoutCtx;
pub use params::Tensor2;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{EncodedSequence, Specials};
use layers::{
    DecBlockCache, DecoderBlock, EncBlockCache, EncoderBlock, LayerNorm, LayerNormCache, Linear,
    LinearCache,
};

/// Errors raised by model construction, forward passes, and checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad model config: {reason}")]
    BadConfig { reason: String },
    #[error("{kind} id {id} at position {position} out of range (limit {limit})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        position: usize,
        limit: usize,
    },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("checkpoint was trained with a different vocabulary (hash {found}, expected {expected})")]
    VocabMismatch { found: String, expected: String },
    #[error("checkpoint missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("checkpoint carries unknown tensor {name:?}")]
    UnknownTensor { name: String },
    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

/// How positions are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Trainable table (the default).
    Learned,
    /// Fixed sinusoidal table; not a parameter.
    Sinusoidal,
}

/// Hyperparameters defining a model's shape and initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    /// Rows of the whole-word table; word ids must stay below this.
    pub max_whole_words: usize,
    pub dropout: f64,
    /// Disabling removes the whole-word table entirely (ablation switch).
    pub whole_word_embedding: bool,
    pub positional: PositionalKind,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Test-scale preset: 2 encoder / 2 decoder layers, width 64.
    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 128,
            max_whole_words: 128,
            dropout: 0.0,
            whole_word_embedding: true,
            positional: PositionalKind::Learned,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// 6/6 layers, width 512, 8 heads.
    pub fn small(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            enc_layers: 6,
            dec_layers: 6,
            max_len: 512,
            max_whole_words: 512,
            dropout: 0.1,
            whole_word_embedding: true,
            positional: PositionalKind::Learned,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// 12/12 layers, width 768, 12 heads.
    pub fn base(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            enc_layers: 12,
            dec_layers: 12,
            max_len: 512,
            max_whole_words: 512,
            dropout: 0.1,
            whole_word_embedding: true,
            positional: PositionalKind::Learned,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: String| Err(ModelError::BadConfig { reason });
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} below 2", self.vocab_size));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".to_string());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".to_string());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".to_string());
        }
        if self.max_whole_words == 0 && self.whole_word_embedding {
            return bad("max_whole_words must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    /// Closed-form parameter count for this shape.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let ff = self.d_ff;
        let mut count = v * d; // token embedding
        if self.positional == PositionalKind::Learned {
            count += self.max_len * d;
        }
        if self.whole_word_embedding {
            count += self.max_whole_words * d;
        }
        // encoder block: attention (4 d^2) + ffn (2 d ff) + two norms (4d)
        count += self.enc_layers * (4 * d * d + 2 * d * ff + 4 * d);
        // decoder block: two attentions (8 d^2) + ffn + three norms (6d)
        count += self.dec_layers * (8 * d * d + 2 * d * ff + 6 * d);
        count += 4 * d; // final norms, encoder + decoder
        count += d * v; // untied output projection
        count
    }
}

/// One supervised example: encoded source text and target token ids (the
/// target ends with the end-of-sequence token).
#[derive(Debug, Clone)]
pub struct Example {
    pub source: EncodedSequence,
    pub target_ids: Vec<usize>,
}

/// The full parameter set plus the forward/backward machinery.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    token_emb: Tensor2,
    pos_emb: Tensor2,
    word_emb: Option<Tensor2>,
    enc_blocks: Vec<EncoderBlock>,
    enc_final_ln: LayerNorm,
    dec_blocks: Vec<DecoderBlock>,
    dec_final_ln: LayerNorm,
    head: Linear,
}

/// Intermediates of one `encode_seq` call, consumed by the backward pass.
pub struct EncodeCache {
    ids: Vec<usize>,
    whole_words: Vec<usize>,
    drop0: Option<Array2<f64>>,
    blocks: Vec<EncBlockCache>,
    final_ln: LayerNormCache,
    /// Per-position validity (false at padding).
    pub valid: Vec<bool>,
}

/// Intermediates of one `decode_logits` call.
pub struct DecodeCache {
    prefix: Vec<usize>,
    drop0: Option<Array2<f64>>,
    blocks: Vec<DecBlockCache>,
    final_ln: LayerNormCache,
    head: LinearCache,
}

impl Model {
    /// Build a model with seeded Gaussian initialization. The construction
    /// order is fixed, so (config → parameters) is deterministic.
    pub fn new(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = config.init_std;

        let token_emb = Tensor2::randn(config.vocab_size, d, std, &mut rng);
        let pos_emb = match config.positional {
            PositionalKind::Learned => Tensor2::randn(config.max_len, d, std, &mut rng),
            PositionalKind::Sinusoidal => sinusoidal_table(config.max_len, d),
        };
        let word_emb = config
            .whole_word_embedding
            .then(|| Tensor2::randn(config.max_whole_words, d, std, &mut rng));

        let enc_blocks = (0..config.enc_layers)
            .map(|_| EncoderBlock::new(d, config.heads, config.d_ff, std, &mut rng))
            .collect();
        let dec_blocks = (0..config.dec_layers)
            .map(|_| DecoderBlock::new(d, config.heads, config.d_ff, std, &mut rng))
            .collect();
        let head = Linear::new(d, config.vocab_size, std, &mut rng);

        Ok(Model {
            config,
            token_emb,
            pos_emb,
            word_emb,
            enc_blocks,
            enc_final_ln: LayerNorm::new(d),
            dec_blocks,
            dec_final_ln: LayerNorm::new(d),
            head,
        })
    }

    // -- embeddings ---------------------------------------------------------

    /// Input representation: `token_emb[id_i] + pos_emb[i] + word_emb[ww_i]`
    /// per row (the whole-word term only when that table is enabled).
    pub fn embed(&self, seq: &EncodedSequence) -> Result<Array2<f64>, ModelError> {
        let n = seq.token_ids.len();
        if n == 0 {
            return Err(ModelError::Empty { what: "input" });
        }
        if n > self.config.max_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        if seq.whole_word_ids.len() != n {
            return Err(ModelError::BadConfig {
                reason: format!(
                    "whole-word ids ({}) and token ids ({n}) disagree in length",
                    seq.whole_word_ids.len()
                ),
            });
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let id = seq.token_ids[i];
            if id >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    kind: "token",
                    id,
                    position: i,
                    limit: self.config.vocab_size,
                });
            }
            let mut row = x.row_mut(i);
            row += &self.token_emb.v.row(id);
            row += &self.pos_emb.v.row(i);
            if let Some(word) = &self.word_emb {
                let ww = seq.whole_word_ids[i];
                if ww >= self.config.max_whole_words {
                    return Err(ModelError::IdOutOfRange {
                        kind: "whole-word",
                        id: ww,
                        position: i,
                        limit: self.config.max_whole_words,
                    });
                }
                row += &word.v.row(ww);
            }
        }
        Ok(x)
    }

    /// Decoder-side embedding: token + position only.
    fn embed_decoder(&self, ids: &[usize]) -> Result<Array2<f64>, ModelError> {
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::Empty { what: "decoder prefix" });
        }
        if n > self.config.max_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((n, d));
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    kind: "token",
                    id,
                    position: i,
                    limit: self.config.vocab_size,
                });
            }
            let mut row = x.row_mut(i);
            row += &self.token_emb.v.row(id);
            row += &self.pos_emb.v.row(i);
        }
        Ok(x)
    }

    // -- forward ------------------------------------------------------------

    /// Contextualize an input sequence. Padding tokens are masked out of
    /// attention, so outputs at real positions do not depend on them.
    pub fn encode_seq(
        &self,
        seq: &EncodedSequence,
        ctx: &mut DropoutCtx,
    ) -> Result<(Array2<f64>, EncodeCache), ModelError> {
        let valid: Vec<bool> = seq.token_ids.iter().map(|&id| id != Specials::PAD).collect();
        if !valid.iter().any(|&v| v) {
            return Err(ModelError::Empty { what: "non-pad input" });
        }
        let mut x = self.embed(seq)?;
        let drop0 = ctx.apply(&mut x);
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for block in &self.enc_blocks {
            let (y, cache) = block.forward(&x, Some(&valid), ctx);
            x = y;
            blocks.push(cache);
        }
        let (out, final_ln) = self.enc_final_ln.forward(&x);
        Ok((
            out,
            EncodeCache {
                ids: seq.token_ids.clone(),
                whole_words: seq.whole_word_ids.clone(),
                drop0,
                blocks,
                final_ln,
                valid,
            },
        ))
    }

    /// Teacher-forced decoder pass: logits for every prefix position.
    /// `prefix` holds the decoder *input* ids (start token followed by the
    /// target shifted right); row j of the output scores the token at
    /// target position j.
    pub fn decode_logits(
        &self,
        prefix: &[usize],
        enc_out: &Array2<f64>,
        enc_valid: Option<&[bool]>,
        ctx: &mut DropoutCtx,
    ) -> Result<(Array2<f64>, DecodeCache), ModelError> {
        if enc_out.nrows() == 0 {
            return Err(ModelError::Empty { what: "encoder output" });
        }
        let mut y = self.embed_decoder(prefix)?;
        let drop0 = ctx.apply(&mut y);
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for block in &self.dec_blocks {
            let (out, cache) = block.forward(&y, enc_out, enc_valid, ctx);
            y = out;
            blocks.push(cache);
        }
        let (normed, final_ln) = self.dec_final_ln.forward(&y);
        let (logits, head) = self.head.forward(&normed);
        Ok((
            logits,
            DecodeCache {
                prefix: prefix.to_vec(),
                drop0,
                blocks,
                final_ln,
                head,
            },
        ))
    }

    /// The decoder input for a target: start-of-decode token (the padding
    /// id, by convention) followed by the target shifted right one step.
    pub fn decoder_input(target_ids: &[usize]) -> Vec<usize> {
        let mut input = Vec::with_capacity(target_ids.len());
        input.push(Specials::PAD);
        input.extend_from_slice(&target_ids[..target_ids.len().saturating_sub(1)]);
        input
    }

    /// Loss and token count for one example (no gradients).
    pub fn forward_loss(
        &self,
        example: &Example,
        ctx: &mut DropoutCtx,
    ) -> Result<(f64, usize), ModelError> {
        if example.target_ids.is_empty() {
            return Err(ModelError::Empty { what: "target" });
        }
        let (enc_out, enc_cache) = self.encode_seq(&example.source, ctx)?;
        let prefix = Model::decoder_input(&example.target_ids);
        let (logits, _) = self.decode_logits(&prefix, &enc_out, Some(&enc_cache.valid), ctx)?;
        nll_loss(&logits, &example.target_ids)
    }

    /// Loss for one example, with gradients accumulated into every tensor's
    /// `g` buffer (callers batch by invoking this repeatedly, then scale).
    pub fn forward_backward(
        &mut self,
        example: &Example,
        ctx: &mut DropoutCtx,
    ) -> Result<(f64, usize), ModelError> {
        if example.target_ids.is_empty() {
            return Err(ModelError::Empty { what: "target" });
        }
        let (enc_out, enc_cache) = self.encode_seq(&example.source, ctx)?;
        let prefix = Model::decoder_input(&example.target_ids);
        let (logits, dec_cache) =
            self.decode_logits(&prefix, &enc_out, Some(&enc_cache.valid), ctx)?;
        let (loss, count, dlogits) = nll_loss_grad(&logits, &example.target_ids)?;

        let g_enc = self.backward_decoder(&dec_cache, &dlogits);
        self.backward_encoder(&enc_cache, &g_enc);
        Ok((loss, count))
    }

    // -- backward -----------------------------------------------------------

    /// Backprop from logits gradient through head, decoder stack, and
    /// decoder-side embeddings; returns the gradient w.r.t. encoder output.
    fn backward_decoder(&mut self, cache: &DecodeCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let g_normed = self.head.backward(&cache.head, dlogits);
        let mut g_y = self.dec_final_ln.backward(&cache.final_ln, &g_normed);
        let mut g_enc: Option<Array2<f64>> = None;
        for (block, bc) in self.dec_blocks.iter_mut().zip(&cache.blocks).rev() {
            let (g, ge) = block.backward(bc, &g_y);
            g_y = g;
            match &mut g_enc {
                Some(acc) => *acc += &ge,
                None => g_enc = Some(ge),
            }
        }
        if let Some(mask) = &cache.drop0 {
            g_y *= mask;
        }
        for (i, &id) in cache.prefix.iter().enumerate() {
            let g_row = g_y.row(i);
            let mut t = self.token_emb.g.row_mut(id);
            t += &g_row;
            if self.config.positional == PositionalKind::Learned {
                let mut p = self.pos_emb.g.row_mut(i);
                p += &g_row;
            }
        }
        g_enc.expect("at least one decoder layer")
    }

    /// Backprop from encoder-output gradient through the encoder stack and
    /// input embeddings.
    fn backward_encoder(&mut self, cache: &EncodeCache, g_enc_out: &Array2<f64>) {
        let mut g_x = self.enc_final_ln.backward(&cache.final_ln, g_enc_out);
        for (block, bc) in self.enc_blocks.iter_mut().zip(&cache.blocks).rev() {
            g_x = block.backward(bc, &g_x);
        }
        if let Some(mask) = &cache.drop0 {
            g_x *= mask;
        }
        for i in 0..cache.ids.len() {
            let g_row = g_x.row(i);
            let mut t = self.token_emb.g.row_mut(cache.ids[i]);
            t += &g_row;
            if self.config.positional == PositionalKind::Learned {
                let mut p = self.pos_emb.g.row_mut(i);
                p += &g_row;
            }
            if let Some(word) = &mut self.word_emb {
                let mut w = word.g.row_mut(cache.whole_words[i]);
                w += &g_row;
            }
        }
    }

    // -- parameter access ----------------------------------------------------

    /// Every trainable tensor with its stable name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor2)> {
        let mut out: Vec<(String, &Tensor2)> = Vec::new();
        out.push(("embed.token".to_string(), &self.token_emb));
        if self.config.positional == PositionalKind::Learned {
            out.push(("embed.pos".to_string(), &self.pos_emb));
        }
        if let Some(word) = &self.word_emb {
            out.push(("embed.word".to_string(), word));
        }
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.push((format!("enc.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("enc.{i}.ln1.bias"), &b.ln1.bias));
            out.push((format!("enc.{i}.attn.wq"), &b.attn.wq.w));
            out.push((format!("enc.{i}.attn.wk"), &b.attn.wk.w));
            out.push((format!("enc.{i}.attn.wv"), &b.attn.wv.w));
            out.push((format!("enc.{i}.attn.wo"), &b.attn.wo.w));
            out.push((format!("enc.{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("enc.{i}.ln2.bias"), &b.ln2.bias));
            out.push((format!("enc.{i}.ffn.w1"), &b.ffn.w1.w));
            out.push((format!("enc.{i}.ffn.w2"), &b.ffn.w2.w));
        }
        out.push(("enc.final_ln.gain".to_string(), &self.enc_final_ln.gain));
        out.push(("enc.final_ln.bias".to_string(), &self.enc_final_ln.bias));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            out.push((format!("dec.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("dec.{i}.ln1.bias"), &b.ln1.bias));
            out.push((format!("dec.{i}.self_attn.wq"), &b.self_attn.wq.w));
            out.push((format!("dec.{i}.self_attn.wk"), &b.self_attn.wk.w));
            out.push((format!("dec.{i}.self_attn.wv"), &b.self_attn.wv.w));
            out.push((format!("dec.{i}.self_attn.wo"), &b.self_attn.wo.w));
            out.push((format!("dec.{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("dec.{i}.ln2.bias"), &b.ln2.bias));
            out.push((format!("dec.{i}.cross_attn.wq"), &b.cross_attn.wq.w));
            out.push((format!("dec.{i}.cross_attn.wk"), &b.cross_attn.wk.w));
            out.push((format!("dec.{i}.cross_attn.wv"), &b.cross_attn.wv.w));
            out.push((format!("dec.{i}.cross_attn.wo"), &b.cross_attn.wo.w));
            out.push((format!("dec.{i}.ln3.gain"), &b.ln3.gain));
            out.push((format!("dec.{i}.ln3.bias"), &b.ln3.bias));
            out.push((format!("dec.{i}.ffn.w1"), &b.ffn.w1.w));
            out.push((format!("dec.{i}.ffn.w2"), &b.ffn.w2.w));
        }
        out.push(("dec.final_ln.gain".to_string(), &self.dec_final_ln.gain));
        out.push(("dec.final_ln.bias".to_string(), &self.dec_final_ln.bias));
        out.push(("head.w".to_string(), &self.head.w));
        out
    }

    /// Mutable variant of [`Model::params`]; same names, same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let mut out: Vec<(String, &mut Tensor2)> = Vec::new();
        out.push(("embed.token".to_string(), &mut self.token_emb));
        if self.config.positional == PositionalKind::Learned {
            out.push(("embed.pos".to_string(), &mut self.pos_emb));
        }
        if let Some(word) = &mut self.word_emb {
            out.push(("embed.word".to_string(), word));
        }
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            out.push((format!("enc.{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("enc.{i}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("enc.{i}.attn.wq"), &mut b.attn.wq.w));
            out.push((format!("enc.{i}.attn.wk"), &mut b.attn.wk.w));
            out.push((format!("enc.{i}.attn.wv"), &mut b.attn.wv.w));
            out.push((format!("enc.{i}.attn.wo"), &mut b.attn.wo.w));
            out.push((format!("enc.{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("enc.{i}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("enc.{i}.ffn.w1"), &mut b.ffn.w1.w));
            out.push((format!("enc.{i}.ffn.w2"), &mut b.ffn.w2.w));
        }
        out.push(("enc.final_ln.gain".to_string(), &mut self.enc_final_ln.gain));
        out.push(("enc.final_ln.bias".to_string(), &mut self.enc_final_ln.bias));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            out.push((format!("dec.{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("dec.{i}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("dec.{i}.self_attn.wq"), &mut b.self_attn.wq.w));
            out.push((format!("dec.{i}.self_attn.wk"), &mut b.self_attn.wk.w));
            out.push((format!("dec.{i}.self_attn.wv"), &mut b.self_attn.wv.w));
            out.push((format!("dec.{i}.self_attn.wo"), &mut b.self_attn.wo.w));
            out.push((format!("dec.{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("dec.{i}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("dec.{i}.cross_attn.wq"), &mut b.cross_attn.wq.w));
            out.push((format!("dec.{i}.cross_attn.wk"), &mut b.cross_attn.wk.w));
            out.push((format!("dec.{i}.cross_attn.wv"), &mut b.cross_attn.wv.w));
            out.push((format!("dec.{i}.cross_attn.wo"), &mut b.cross_attn.wo.w));
            out.push((format!("dec.{i}.ln3.gain"), &mut b.ln3.gain));
            out.push((format!("dec.{i}.ln3.bias"), &mut b.ln3.bias));
            out.push((format!("dec.{i}.ffn.w1"), &mut b.ffn.w1.w));
            out.push((format!("dec.{i}.ffn.w2"), &mut b.ffn.w2.w));
        }
        out.push(("dec.final_ln.gain".to_string(), &mut self.dec_final_ln.gain));
        out.push(("dec.final_ln.bias".to_string(), &mut self.dec_final_ln.bias));
        out.push(("head.w".to_string(), &mut self.head.w));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|(_, t)| t.g.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for (_, t) in self.params_mut() {
            t.g.mapv_inplace(|g| g * factor);
        }
    }

    /// Actual parameter count, as reached by the visitor.
    pub fn param_count_actual(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn sinusoidal_table(max_len: usize, d: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(max_len, d);
    for p in 0..max_len {
        for j in 0..d {
            let angle = p as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            t.v[[p, j]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Summed negative log-likelihood of the targets under row-wise softmax,
/// plus the number of scored positions. Padding targets are skipped.
pub fn nll_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, usize), ModelError> {
    let (loss, count, _) = nll_core(logits, targets, false)?;
    Ok((loss, count))
}

/// Loss, count, and the gradient of the summed loss w.r.t. the logits.
pub fn nll_loss_grad(
    logits: &Array2<f64>,
    targets: &[usize],
) -> Result<(f64, usize, Array2<f64>), ModelError> {
    let (loss, count, grad) = nll_core(logits, targets, true)?;
    Ok((loss, count, grad.expect("grad requested")))
}

fn nll_core(
    logits: &Array2<f64>,
    targets: &[usize],
    want_grad: bool,
) -> Result<(f64, usize, Option<Array2<f64>>), ModelError> {
    if targets.is_empty() {
        return Err(ModelError::Empty { what: "target" });
    }
    if logits.nrows() != targets.len() {
        return Err(ModelError::BadConfig {
            reason: format!(
                "logit rows ({}) and targets ({}) disagree",
                logits.nrows(),
                targets.len()
            ),
        });
    }
    let vocab = logits.ncols();
    let mut grad = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    let mut loss = 0.0;
    let mut count = 0;
    for (j, &target) in targets.iter().enumerate() {
        if target == Specials::PAD {
            continue; // padding positions carry no loss
        }
        if target >= vocab {
            return Err(ModelError::IdOutOfRange {
                kind: "target token",
                id: target,
                position: j,
                limit: vocab,
            });
        }
        let row = logits.row(j);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[target];
        count += 1;
        if let Some(g) = &mut grad {
            for k in 0..vocab {
                g[[j, k]] = ((row[k] - max).exp()) / sum_exp;
            }
            g[[j, target]] -= 1.0;
        }
    }
    if count == 0 {
        return Err(ModelError::Empty { what: "non-pad target" });
    }
    Ok((loss, count, grad))
}
