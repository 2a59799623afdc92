//! Transformer building blocks with hand-written forward and backward
//! passes.
//!
//! Every `forward` returns its output together with a cache of the
//! intermediates the matching `backward` needs; `backward` consumes the
//! cache, accumulates parameter gradients in place (`+=` into each tensor's
//! `g`), and returns the gradient with respect to its inputs. Projections
//! carry no bias; layer norms carry gain and bias.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::params::Tensor2;

/// Numerical floor inside layer-norm denominators.
pub const LN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Dropout context threaded through a forward pass. Evaluation mode carries
/// no RNG and applies nothing, which makes inference deterministic.
pub struct DropoutCtx<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha20Rng>,
}

impl<'a> DropoutCtx<'a> {
    pub fn eval() -> DropoutCtx<'static> {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha20Rng) -> DropoutCtx<'a> {
        DropoutCtx { p, rng: Some(rng) }
    }

    /// Apply inverted dropout in place; the returned mask (zeros and
    /// `1/(1-p)` values) is what backward must multiply by. `None` means
    /// identity (eval mode or p = 0).
    pub fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        let rng = self.rng.as_deref_mut()?;
        if self.p == 0.0 {
            return None;
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask = Array2::from_shape_fn(x.dim(), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        });
        *x *= &mask;
        Some(mask)
    }
}

fn dropout_backward(mask: &Option<Array2<f64>>, g: &mut Array2<f64>) {
    if let Some(m) = mask {
        *g *= m;
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Bias-free affine map `y = x · w`, with `w` of shape (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor2,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Linear {
        Linear {
            w: Tensor2::randn(input, output, std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = x.dot(&self.w.v);
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulates `g_w += x^T · g_y`; returns `g_x = g_y · w^T`.
    pub fn backward(&mut self, cache: &LinearCache, g_y: &Array2<f64>) -> Array2<f64> {
        self.w.g += &cache.x.t().dot(g_y);
        g_y.dot(&self.w.v.t())
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with learned gain and bias (shape 1×d).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor2,
    pub bias: Tensor2,
}

pub struct LayerNormCache {
    /// Normalized rows (x - mean) / sqrt(var + eps).
    xhat: Array2<f64>,
    /// Per-row 1 / sqrt(var + eps).
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor2::constant(1, d, 1.0),
            bias: Tensor2::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std[i] = is;
        }
        let y = &xhat * &self.gain.v.row(0) + &self.bias.v.row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, g_y: &Array2<f64>) -> Array2<f64> {
        let d = g_y.ncols() as f64;
        // parameter gradients: sum over rows
        self.gain.g += &(g_y * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.bias.g += &g_y.sum_axis(Axis(0)).insert_axis(Axis(0));

        // input gradient, row by row:
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
        let dxhat = g_y * &self.gain.v.row(0);
        let mut g_x = Array2::zeros(g_y.raw_dim());
        for i in 0..g_y.nrows() {
            let dxh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let m1 = dxh.sum() / d;
            let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = cache.inv_std[i];
            for j in 0..g_y.ncols() {
                g_x[[i, j]] = is * (dxh[j] - m1 - xh[j] * m2);
            }
        }
        g_x
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention with bias-free projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention weights, one (m×n) matrix per head.
    probs: Vec<Array2<f64>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(d: usize, heads: usize, std: f64, rng: &mut R) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(d, d, std, rng),
            wk: Linear::new(d, d, std, rng),
            wv: Linear::new(d, d, std, rng),
            wo: Linear::new(d, d, std, rng),
            heads,
        }
    }

    /// `q_in` is (m×d); `kv_in` is (n×d). With `causal` set, query row i may
    /// attend only to key positions ≤ i (requires m == n). `key_valid`, when
    /// given, masks key positions out of every query's softmax (padding).
    pub fn forward(
        &self,
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
        causal: bool,
        key_valid: Option<&[bool]>,
    ) -> (Array2<f64>, AttnCache) {
        let d = q_in.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        debug_assert!(!causal || q_in.nrows() == kv_in.nrows());
        if let Some(valid) = key_valid {
            debug_assert_eq!(valid.len(), kv_in.nrows());
            debug_assert!(valid.iter().any(|&v| v), "attention needs a valid key");
        }

        let (q, q_cache) = self.wq.forward(q_in);
        let (k, k_cache) = self.wk.forward(kv_in);
        let (v, v_cache) = self.wv.forward(kv_in);

        let m = q.nrows();
        let n = k.nrows();
        let mut concat = Array2::zeros((m, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for i in 0..m {
                for j in 0..n {
                    let masked = (causal && j > i)
                        || key_valid.is_some_and(|valid| !valid[j]);
                    if masked {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }

        let (out, o_cache) = self.wo.forward(&concat);
        (
            out,
            AttnCache {
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                q,
                k,
                v,
                probs,
            },
        )
    }

    /// Returns `(g_q_in, g_kv_in)`. Self-attention callers add the two.
    pub fn backward(
        &mut self,
        cache: &AttnCache,
        g_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = cache.q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let g_concat = self.wo.backward(&cache.o_cache, g_out);
        let mut g_q = Array2::zeros(cache.q.raw_dim());
        let mut g_k = Array2::zeros(cache.k.raw_dim());
        let mut g_v = Array2::zeros(cache.v.raw_dim());

        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let g_oh = g_concat.slice(cols);
            let vh = cache.v.slice(cols);
            let kh = cache.k.slice(cols);
            let qh = cache.q.slice(cols);

            let g_p = g_oh.dot(&vh.t());
            g_v.slice_mut(cols).assign(&p.t().dot(&g_oh));

            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P)); masked
            // entries have P = 0 and so get zero gradient automatically
            let mut g_s = Array2::zeros(p.raw_dim());
            for i in 0..p.nrows() {
                let dot = g_p
                    .row(i)
                    .iter()
                    .zip(p.row(i).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                for j in 0..p.ncols() {
                    g_s[[i, j]] = p[[i, j]] * (g_p[[i, j]] - dot);
                }
            }
            g_s *= scale;

            g_q.slice_mut(cols).assign(&g_s.dot(&kh));
            g_k.slice_mut(cols).assign(&g_s.t().dot(&qh));
        }

        let g_q_in = self.wq.backward(&cache.q_cache, &g_q);
        let g_k_in = self.wk.backward(&cache.k_cache, &g_k);
        let g_v_in = self.wv.backward(&cache.v_cache, &g_v);
        (g_q_in, g_k_in + g_v_in)
    }
}

/// Row-wise softmax in place; `-inf` entries come out exactly 0 as long as
/// each row has at least one finite entry.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // a fully masked row is a caller bug, but NaN scores (diverged
        // training) must flow through so the loop can abort with an error
        debug_assert!(
            max != f64::NEG_INFINITY || row.iter().any(|v| v.is_nan()),
            "softmax row fully masked"
        );
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

/// Two-layer position-wise network: `y = relu(x · w1) · w2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

pub struct FfnCache {
    c1: LinearCache,
    c2: LinearCache,
    /// Pre-activation of the hidden layer, for the ReLU gate in backward.
    hidden_pre: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng>(d: usize, d_ff: usize, std: f64, rng: &mut R) -> FeedForward {
        FeedForward {
            w1: Linear::new(d, d_ff, std, rng),
            w2: Linear::new(d_ff, d, std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let (hidden_pre, c1) = self.w1.forward(x);
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let (y, c2) = self.w2.forward(&hidden);
        (y, FfnCache { c1, c2, hidden_pre })
    }

    pub fn backward(&mut self, cache: &FfnCache, g_y: &Array2<f64>) -> Array2<f64> {
        let mut g_hidden = self.w2.backward(&cache.c2, g_y);
        g_hidden.zip_mut_with(&cache.hidden_pre, |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        self.w1.backward(&cache.c1, &g_hidden)
    }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

/// Pre-norm encoder block: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct EncBlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    ffn: FfnCache,
    drop2: Option<Array2<f64>>,
}

impl EncoderBlock {
    pub fn new<R: Rng>(d: usize, heads: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, std, rng),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, std, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        key_valid: Option<&[bool]>,
        ctx: &mut DropoutCtx,
    ) -> (Array2<f64>, EncBlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (mut a, attn) = self.attn.forward(&n1, &n1, false, key_valid);
        let drop1 = ctx.apply(&mut a);
        let x1 = x + &a;

        let (n2, ln2) = self.ln2.forward(&x1);
        let (mut f, ffn) = self.ffn.forward(&n2);
        let drop2 = ctx.apply(&mut f);
        let y = &x1 + &f;
        (
            y,
            EncBlockCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncBlockCache, g_y: &Array2<f64>) -> Array2<f64> {
        let mut g_f = g_y.clone();
        dropout_backward(&cache.drop2, &mut g_f);
        let g_n2 = self.ffn.backward(&cache.ffn, &g_f);
        let mut g_x1 = g_y + &self.ln2.backward(&cache.ln2, &g_n2);

        let mut g_a = g_x1.clone();
        dropout_backward(&cache.drop1, &mut g_a);
        let (g_q, g_kv) = self.attn.backward(&cache.attn, &g_a);
        let g_n1 = g_q + g_kv;
        g_x1 += &self.ln1.backward(&cache.ln1, &g_n1);
        g_x1
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder output, then the feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecBlockCache {
    ln1: LayerNormCache,
    self_attn: AttnCache,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    cross_attn: AttnCache,
    drop2: Option<Array2<f64>>,
    ln3: LayerNormCache,
    ffn: FfnCache,
    drop3: Option<Array2<f64>>,
}

impl DecoderBlock {
    pub fn new<R: Rng>(d: usize, heads: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(d, heads, std, rng),
            ln2: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(d, heads, std, rng),
            ln3: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, std, rng),
        }
    }

    pub fn forward(
        &self,
        y: &Array2<f64>,
        enc_out: &Array2<f64>,
        enc_valid: Option<&[bool]>,
        ctx: &mut DropoutCtx,
    ) -> (Array2<f64>, DecBlockCache) {
        let (n1, ln1) = self.ln1.forward(y);
        let (mut a, self_attn) = self.self_attn.forward(&n1, &n1, true, None);
        let drop1 = ctx.apply(&mut a);
        let y1 = y + &a;

        let (n2, ln2) = self.ln2.forward(&y1);
        let (mut c, cross_attn) = self.cross_attn.forward(&n2, enc_out, false, enc_valid);
        let drop2 = ctx.apply(&mut c);
        let y2 = &y1 + &c;

        let (n3, ln3) = self.ln3.forward(&y2);
        let (mut f, ffn) = self.ffn.forward(&n3);
        let drop3 = ctx.apply(&mut f);
        let out = &y2 + &f;
        (
            out,
            DecBlockCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ffn,
                drop3,
            },
        )
    }

    /// Returns `(g_y, g_enc_out)`.
    pub fn backward(
        &mut self,
        cache: &DecBlockCache,
        g_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut g_f = g_out.clone();
        dropout_backward(&cache.drop3, &mut g_f);
        let g_n3 = self.ffn.backward(&cache.ffn, &g_f);
        let g_y2 = g_out + &self.ln3.backward(&cache.ln3, &g_n3);

        let mut g_c = g_y2.clone();
        dropout_backward(&cache.drop2, &mut g_c);
        let (g_n2, g_enc) = self.cross_attn.backward(&cache.cross_attn, &g_c);
        let g_y1 = &g_y2 + &self.ln2.backward(&cache.ln2, &g_n2);

        let mut g_a = g_y1.clone();
        dropout_backward(&cache.drop1, &mut g_a);
        let (g_q, g_kv) = self.self_attn.backward(&cache.self_attn, &g_a);
        let g_n1 = g_q + g_kv;
        let g_y = &g_y1 + &self.ln1.backward(&cache.ln1, &g_n1);
        (g_y, g_enc)
    }
}
