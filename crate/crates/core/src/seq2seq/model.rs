//! Forward and backward passes.
//!
//! Pre-norm transformer blocks, residual streams stored as flat
//! `n x d` row-major buffers, and a hand-written reverse pass that
//! accumulates into a flat gradient vector mirroring the parameter
//! layout. Dropout masks are drawn in a fixed order from one seeded
//! stream per call, so every pass is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS, Sentence, TokenId};

use super::params::{AttnOffsets, FfnOffsets};
use super::{DropoutMode, Model, ModelError};

const LN_EPS: f64 = 1e-5;

/// Encoder output: final hidden states plus (optionally) the activation
/// cache needed to backpropagate into the encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub ids: Sentence,
    pub lang: usize,
    /// `n x model_dim`, one row per input token.
    pub hidden: Vec<f64>,
    pub n: usize,
    cache: Option<EncoderCache>,
}

impl Encoded {
    /// Hidden states as one vector per token (the shape the quality
    /// estimators consume).
    pub fn hidden_vecs(&self) -> Vec<Vec<f64>> {
        let d = self.hidden.len() / self.n.max(1);
        (0..self.n)
            .map(|t| self.hidden[t * d..(t + 1) * d].to_vec())
            .collect()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Loss (and per-step negative log-likelihoods) of one teacher-forced
/// decode.
#[derive(Debug, Clone)]
pub struct DecodeLossOutput {
    /// Weighted sentence loss `sum_j alpha_j * nll_j` (unscaled by the
    /// sentence weight).
    pub loss: f64,
    /// Per-step NLLs, one per target token plus the end-symbol step.
    pub token_nlls: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LnCache {
    /// Normalized activations before gain/bias, `n x d`.
    xhat: Vec<f64>,
    /// Reciprocal standard deviation per row.
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    ln: LnCache,
    /// LN output feeding the projections, `n x d`.
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `heads x n x m` flat.
    probs: Vec<f64>,
    /// Concatenated per-head context, `n x d` (input to the output
    /// projection).
    ctx: Vec<f64>,
    drop: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct FfnCache {
    ln: LnCache,
    h: Vec<f64>,
    /// Post-relu activations, `n x ffn_dim`.
    act: Vec<f64>,
    drop: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    emb_drop: Option<Vec<f64>>,
    layers: Vec<(AttnCache, FfnCache)>,
    final_ln: LnCache,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    emb_drop: Option<Vec<f64>>,
    layers: Vec<(AttnCache, AttnCache, FfnCache)>,
    final_ln: LnCache,
}

struct DecoderRun {
    /// Final decoder states, `steps x d`.
    out: Vec<f64>,
    steps: usize,
    cache: Option<DecoderCache>,
}

/// Per-call dropout state: rate plus a seeded stream. Masks are drawn in
/// a fixed order regardless of whether they are recorded.
struct Drop {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Drop {
    fn new(rate: f64, mode: DropoutMode) -> Self {
        match mode {
            DropoutMode::Off => Drop { rate, rng: None },
            DropoutMode::On { seed } => Drop {
                rate,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    /// Applies inverted dropout to `x` in place; returns the mask when
    /// recording.
    fn apply(&mut self, x: &mut [f64], record: bool) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mut mask = Vec::new();
        if record {
            mask.reserve(x.len());
        }
        for xi in x.iter_mut() {
            let scale = if rng.random::<f64>() < self.rate {
                0.0
            } else {
                keep_scale
            };
            *xi *= scale;
            if record {
                mask.push(scale);
            }
        }
        record.then_some(mask)
    }
}

// ---------------------------------------------------------------------
// primitive forward/backward pieces
// ---------------------------------------------------------------------

fn layer_norm_fwd(x: &mut [f64], n: usize, d: usize, gamma: &[f64], beta: &[f64]) -> LnCache {
    let mut xhat = vec![0.0f64; n * d];
    let mut rstd = vec![0.0f64; n];
    for t in 0..n {
        let row = &mut x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        let xh = &mut xhat[t * d..(t + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
            row[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    LnCache { xhat, rstd }
}

/// `dx += LN'(dy)`; also accumulates dgamma/dbeta.
fn layer_norm_bwd(
    dy: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    n: usize,
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    for t in 0..n {
        let dy_row = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let r = cache.rstd[t];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dy_row[j] * xh[j];
            dbeta[j] += dy_row[j];
            let dxh = dy_row[j] * gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dx_row = &mut dx[t * d..(t + 1) * d];
        for j in 0..d {
            let dxh = dy_row[j] * gamma[j];
            dx_row[j] += r * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// `out[t] = x[t] * w + b`, `w` is `din x dout` row-major.
fn linear_fwd(x: &[f64], n: usize, din: usize, dout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; n * dout];
    for t in 0..n {
        let x_row = &x[t * din..(t + 1) * din];
        let out_row = &mut out[t * dout..(t + 1) * dout];
        out_row.copy_from_slice(b);
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w_row = &w[k * dout..(k + 1) * dout];
            for o in 0..dout {
                out_row[o] += xv * w_row[o];
            }
        }
    }
    out
}

/// Backward of [`linear_fwd`]: accumulates `dw`, `db`, and `dx`.
fn linear_bwd(
    x: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for t in 0..n {
        let x_row = &x[t * din..(t + 1) * din];
        let dy_row = &dy[t * dout..(t + 1) * dout];
        for o in 0..dout {
            db[o] += dy_row[o];
        }
        for k in 0..din {
            let xv = x_row[k];
            let w_row = &w[k * dout..(k + 1) * dout];
            let dw_row = &mut dw[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for o in 0..dout {
                dw_row[o] += xv * dy_row[o];
                acc += dy_row[o] * w_row[o];
            }
            dx[t * din + k] += acc;
        }
    }
}

fn softmax_rows_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------
// attention / ffn blocks (pre-norm, residual handled here)
// ---------------------------------------------------------------------

struct AttnIn<'a> {
    off: &'a AttnOffsets,
    d: usize,
    heads: usize,
    causal: bool,
}

impl Model {
    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    /// `x += Drop(Attn(LN(x)))`; keys/values come from `kv` (or from the
    /// LN output itself when `kv` is `None`).
    #[allow(clippy::too_many_arguments)]
    fn attn_block_fwd(
        &self,
        a: &AttnIn<'_>,
        x: &mut [f64],
        n: usize,
        kv: Option<(&[f64], usize)>,
        drop: &mut Drop,
        record: bool,
    ) -> Option<AttnCache> {
        let d = a.d;
        let heads = a.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut h = x.to_vec();
        let ln = layer_norm_fwd(
            &mut h,
            n,
            d,
            self.p(a.off.ln_gamma, d),
            self.p(a.off.ln_beta, d),
        );
        let (kv_src, m): (&[f64], usize) = match kv {
            Some((src, m)) => (src, m),
            None => (&h, n),
        };
        let q = linear_fwd(&h, n, d, d, self.p(a.off.wq, d * d), self.p(a.off.bq, d));
        let k = linear_fwd(kv_src, m, d, d, self.p(a.off.wk, d * d), self.p(a.off.bk, d));
        let v = linear_fwd(kv_src, m, d, d, self.p(a.off.wv, d * d), self.p(a.off.bv, d));

        let mut probs = vec![0.0f64; heads * n * m];
        let mut ctx = vec![0.0f64; n * d];
        for hd in 0..heads {
            let col = hd * dh;
            for i in 0..n {
                let limit = if a.causal { i + 1 } else { m };
                let q_row = &q[i * d + col..i * d + col + dh];
                let p_row = &mut probs[hd * n * m + i * m..hd * n * m + i * m + m];
                for j in 0..limit {
                    let k_row = &k[j * d + col..j * d + col + dh];
                    p_row[j] = scale * q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_rows_inplace(&mut p_row[..limit]);
                let ctx_row = &mut ctx[i * d + col..i * d + col + dh];
                for j in 0..limit {
                    let pj = p_row[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let v_row = &v[j * d + col..j * d + col + dh];
                    for c in 0..dh {
                        ctx_row[c] += pj * v_row[c];
                    }
                }
            }
        }
        let mut out = linear_fwd(&ctx, n, d, d, self.p(a.off.wo, d * d), self.p(a.off.bo, d));
        let mask = drop.apply(&mut out, record);
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }
        record.then_some(AttnCache {
            ln,
            h,
            q,
            k,
            v,
            probs,
            ctx,
            drop: mask,
        })
    }

    /// Backward of [`Model::attn_block_fwd`]. `dx` holds the gradient of
    /// the block output on entry and of the block input on exit. For
    /// cross-attention, key/value gradients are accumulated into `dkv`.
    #[allow(clippy::too_many_arguments)]
    fn attn_block_bwd(
        &self,
        a: &AttnIn<'_>,
        cache: &AttnCache,
        n: usize,
        kv: Option<(&[f64], usize, &mut [f64])>,
        dx: &mut [f64],
        grads: &mut [f64],
    ) {
        let d = a.d;
        let heads = a.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // gradient at the output projection (undo dropout)
        let mut dout = dx.to_vec();
        if let Some(mask) = &cache.drop {
            for (g, s) in dout.iter_mut().zip(mask) {
                *g *= s;
            }
        }

        let m = match &kv {
            Some((_, m, _)) => *m,
            None => n,
        };
        let mut dctx = vec![0.0f64; n * d];
        {
            let (dwo, dbo) = (a.off.wo, a.off.bo);
            // split-borrow the grads buffer around the two ranges
            let w = self.p(dwo, d * d).to_vec();
            let mut dw = vec![0.0f64; d * d];
            let mut db = vec![0.0f64; d];
            linear_bwd(&cache.ctx, &dout, n, d, d, &w, &mut dw, &mut db, &mut dctx);
            for (g, v) in grads[dwo..dwo + d * d].iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in grads[dbo..dbo + d].iter_mut().zip(&db) {
                *g += v;
            }
        }

        let mut dq = vec![0.0f64; n * d];
        let mut dk = vec![0.0f64; m * d];
        let mut dv = vec![0.0f64; m * d];
        for hd in 0..heads {
            let col = hd * dh;
            for i in 0..n {
                let limit = if a.causal { i + 1 } else { m };
                let p_row = &cache.probs[hd * n * m + i * m..hd * n * m + i * m + m];
                let dctx_row = &dctx[i * d + col..i * d + col + dh];
                // dprobs and probs-weighted dv
                let mut dprobs = vec![0.0f64; limit];
                for j in 0..limit {
                    let v_row = &cache.v[j * d + col..j * d + col + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += dctx_row[c] * v_row[c];
                    }
                    dprobs[j] = acc;
                    let pj = p_row[j];
                    if pj != 0.0 {
                        let dv_row = &mut dv[j * d + col..j * d + col + dh];
                        for c in 0..dh {
                            dv_row[c] += pj * dctx_row[c];
                        }
                    }
                }
                // softmax backward
                let dot: f64 = dprobs.iter().zip(p_row).map(|(dp, p)| dp * p).sum();
                let q_row = &cache.q[i * d + col..i * d + col + dh];
                let dq_row = &mut dq[i * d + col..i * d + col + dh];
                for j in 0..limit {
                    let ds = p_row[j] * (dprobs[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_row = &cache.k[j * d + col..j * d + col + dh];
                    let dk_row = &mut dk[j * d + col..j * d + col + dh];
                    for c in 0..dh {
                        dq_row[c] += ds * k_row[c];
                        dk_row[c] += ds * q_row[c];
                    }
                }
            }
        }

        // back through the projections
        let mut dh_buf = vec![0.0f64; n * d];
        {
            let w = self.p(a.off.wq, d * d).to_vec();
            let mut dw = vec![0.0f64; d * d];
            let mut db = vec![0.0f64; d];
            linear_bwd(&cache.h, &dq, n, d, d, &w, &mut dw, &mut db, &mut dh_buf);
            for (g, v) in grads[a.off.wq..a.off.wq + d * d].iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in grads[a.off.bq..a.off.bq + d].iter_mut().zip(&db) {
                *g += v;
            }
        }
        match kv {
            None => {
                // self-attention: k/v gradients also land on the LN output
                for (dg, woff, boff) in [(&dk, a.off.wk, a.off.bk), (&dv, a.off.wv, a.off.bv)] {
                    let w = self.p(woff, d * d).to_vec();
                    let mut dw = vec![0.0f64; d * d];
                    let mut db = vec![0.0f64; d];
                    linear_bwd(&cache.h, dg, n, d, d, &w, &mut dw, &mut db, &mut dh_buf);
                    for (g, v) in grads[woff..woff + d * d].iter_mut().zip(&dw) {
                        *g += v;
                    }
                    for (g, v) in grads[boff..boff + d].iter_mut().zip(&db) {
                        *g += v;
                    }
                }
            }
            Some((kv_src, m, dkv)) => {
                for (dg, woff, boff) in [(&dk, a.off.wk, a.off.bk), (&dv, a.off.wv, a.off.bv)] {
                    let w = self.p(woff, d * d).to_vec();
                    let mut dw = vec![0.0f64; d * d];
                    let mut db = vec![0.0f64; d];
                    linear_bwd(kv_src, dg, m, d, d, &w, &mut dw, &mut db, dkv);
                    for (g, v) in grads[woff..woff + d * d].iter_mut().zip(&dw) {
                        *g += v;
                    }
                    for (g, v) in grads[boff..boff + d].iter_mut().zip(&db) {
                        *g += v;
                    }
                }
            }
        }

        // LN backward adds the sublayer path onto the residual passthrough
        let gamma = self.p(a.off.ln_gamma, d).to_vec();
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        layer_norm_bwd(&dh_buf, &cache.ln, &gamma, n, d, &mut dgamma, &mut dbeta, dx);
        for (g, v) in grads[a.off.ln_gamma..a.off.ln_gamma + d].iter_mut().zip(&dgamma) {
            *g += v;
        }
        for (g, v) in grads[a.off.ln_beta..a.off.ln_beta + d].iter_mut().zip(&dbeta) {
            *g += v;
        }
    }

    /// `x += Drop(W2 relu(W1 LN(x) + b1) + b2)`.
    fn ffn_block_fwd(
        &self,
        off: &FfnOffsets,
        d: usize,
        f: usize,
        x: &mut [f64],
        n: usize,
        drop: &mut Drop,
        record: bool,
    ) -> Option<FfnCache> {
        let mut h = x.to_vec();
        let ln = layer_norm_fwd(&mut h, n, d, self.p(off.ln_gamma, d), self.p(off.ln_beta, d));
        let mut act = linear_fwd(&h, n, d, f, self.p(off.w1, d * f), self.p(off.b1, f));
        for a in act.iter_mut() {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
        let mut out = linear_fwd(&act, n, f, d, self.p(off.w2, f * d), self.p(off.b2, d));
        let mask = drop.apply(&mut out, record);
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }
        record.then_some(FfnCache {
            ln,
            h,
            act,
            drop: mask,
        })
    }

    fn ffn_block_bwd(
        &self,
        off: &FfnOffsets,
        d: usize,
        f: usize,
        cache: &FfnCache,
        n: usize,
        dx: &mut [f64],
        grads: &mut [f64],
    ) {
        let mut dout = dx.to_vec();
        if let Some(mask) = &cache.drop {
            for (g, s) in dout.iter_mut().zip(mask) {
                *g *= s;
            }
        }
        let mut dact = vec![0.0f64; n * f];
        {
            let w = self.p(off.w2, f * d).to_vec();
            let mut dw = vec![0.0f64; f * d];
            let mut db = vec![0.0f64; d];
            linear_bwd(&cache.act, &dout, n, f, d, &w, &mut dw, &mut db, &mut dact);
            for (g, v) in grads[off.w2..off.w2 + f * d].iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in grads[off.b2..off.b2 + d].iter_mut().zip(&db) {
                *g += v;
            }
        }
        // relu
        for (da, a) in dact.iter_mut().zip(&cache.act) {
            if *a <= 0.0 {
                *da = 0.0;
            }
        }
        let mut dh = vec![0.0f64; n * d];
        {
            let w = self.p(off.w1, d * f).to_vec();
            let mut dw = vec![0.0f64; d * f];
            let mut db = vec![0.0f64; f];
            linear_bwd(&cache.h, &dact, n, d, f, &w, &mut dw, &mut db, &mut dh);
            for (g, v) in grads[off.w1..off.w1 + d * f].iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in grads[off.b1..off.b1 + f].iter_mut().zip(&db) {
                *g += v;
            }
        }
        let gamma = self.p(off.ln_gamma, d).to_vec();
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        layer_norm_bwd(&dh, &cache.ln, &gamma, n, d, &mut dgamma, &mut dbeta, dx);
        for (g, v) in grads[off.ln_gamma..off.ln_gamma + d].iter_mut().zip(&dgamma) {
            *g += v;
        }
        for (g, v) in grads[off.ln_beta..off.ln_beta + d].iter_mut().zip(&dbeta) {
            *g += v;
        }
    }

    fn embed(&self, ids: &[TokenId], lang: usize) -> Vec<f64> {
        let d = self.config.model_dim;
        let mut x = vec![0.0f64; ids.len() * d];
        let lang_row = self.p(self.layout.lang_emb + lang * d, d);
        for (t, &id) in ids.iter().enumerate() {
            let tok = self.p(self.layout.tok_emb + id * d, d);
            let pos = self.p(self.layout.pos_emb + t * d, d);
            let row = &mut x[t * d..(t + 1) * d];
            for j in 0..d {
                row[j] = tok[j] + pos[j] + lang_row[j];
            }
        }
        x
    }

    fn check_sentence(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySentence);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                got: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    fn check_lang(&self, lang: usize) -> Result<(), ModelError> {
        if lang >= self.config.num_languages {
            return Err(ModelError::LanguageOutOfRange {
                got: lang,
                num: self.config.num_languages,
            });
        }
        Ok(())
    }

    /// Runs the encoder. `record` keeps the activation cache needed for a
    /// later backward pass.
    pub fn encode(
        &self,
        ids: &[TokenId],
        lang: usize,
        dropout: DropoutMode,
        record: bool,
    ) -> Result<Encoded, ModelError> {
        self.check_sentence(ids)?;
        self.check_lang(lang)?;
        let d = self.config.model_dim;
        let n = ids.len();
        let mut drop = Drop::new(self.config.dropout, dropout);

        let mut x = self.embed(ids, lang);
        let emb_drop = drop.apply(&mut x, record);
        let mut layers = Vec::new();
        for l in 0..self.config.layers {
            let off = self.layout.enc[l];
            let attn_in = AttnIn {
                off: &off.attn,
                d,
                heads: self.config.heads,
                causal: false,
            };
            let ac = self.attn_block_fwd(&attn_in, &mut x, n, None, &mut drop, record);
            let fc = self.ffn_block_fwd(
                &off.ffn,
                d,
                self.config.ffn_dim,
                &mut x,
                n,
                &mut drop,
                record,
            );
            if record {
                layers.push((ac.unwrap(), fc.unwrap()));
            }
        }
        let final_ln = layer_norm_fwd(
            &mut x,
            n,
            d,
            self.p(self.layout.enc_ln_gamma, d),
            self.p(self.layout.enc_ln_beta, d),
        );
        let cache = record.then_some(EncoderCache {
            emb_drop,
            layers,
            final_ln,
        });
        Ok(Encoded {
            ids: ids.to_vec(),
            lang,
            hidden: x,
            n,
            cache,
        })
    }

    fn decoder_forward(
        &self,
        enc: &Encoded,
        inputs: &[TokenId],
        tgt_lang: usize,
        drop: &mut Drop,
        record: bool,
    ) -> DecoderRun {
        let d = self.config.model_dim;
        let steps = inputs.len();
        let mut x = self.embed(inputs, tgt_lang);
        let emb_drop = drop.apply(&mut x, record);
        let mut layers = Vec::new();
        for l in 0..self.config.layers {
            let off = self.layout.dec[l];
            let self_in = AttnIn {
                off: &off.self_attn,
                d,
                heads: self.config.heads,
                causal: true,
            };
            let sc = self.attn_block_fwd(&self_in, &mut x, steps, None, drop, record);
            let cross_in = AttnIn {
                off: &off.cross_attn,
                d,
                heads: self.config.heads,
                causal: false,
            };
            let cc = self.attn_block_fwd(
                &cross_in,
                &mut x,
                steps,
                Some((&enc.hidden, enc.n)),
                drop,
                record,
            );
            let fc = self.ffn_block_fwd(
                &off.ffn,
                d,
                self.config.ffn_dim,
                &mut x,
                steps,
                drop,
                record,
            );
            if record {
                layers.push((sc.unwrap(), cc.unwrap(), fc.unwrap()));
            }
        }
        let final_ln = layer_norm_fwd(
            &mut x,
            steps,
            d,
            self.p(self.layout.dec_ln_gamma, d),
            self.p(self.layout.dec_ln_beta, d),
        );
        DecoderRun {
            out: x,
            steps,
            cache: record.then_some(DecoderCache {
                emb_drop,
                layers,
                final_ln,
            }),
        }
    }

    /// Logits of one decoder state row against the tied token embeddings.
    fn logits_for_state(&self, state: &[f64]) -> Vec<f64> {
        let d = self.config.model_dim;
        let v = self.config.vocab_size;
        let emb = self.p(self.layout.tok_emb, v * d);
        let mut logits = vec![0.0f64; v];
        for (vi, logit) in logits.iter_mut().enumerate() {
            let row = &emb[vi * d..(vi + 1) * d];
            *logit = state.iter().zip(row).map(|(a, b)| a * b).sum();
        }
        logits
    }

    /// Teacher-forced weighted cross-entropy of `target` (plus the
    /// end-symbol step) given encoder output `enc`.
    ///
    /// `token_weights` must hold `target.len() + 1` entries summing to 1;
    /// `None` means the uniform `1/(len+1)` (the unweighted token-mean
    /// objective). Parameter gradients, scaled by `sentence_weight`, are
    /// accumulated into `grad_acc` when given; that requires `enc` to
    /// have been encoded with `record = true`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_loss(
        &self,
        enc: &Encoded,
        target: &[TokenId],
        tgt_lang: usize,
        dropout: DropoutMode,
        token_weights: Option<&[f64]>,
        sentence_weight: f64,
        mut grad_acc: Option<&mut [f64]>,
    ) -> Result<DecodeLossOutput, ModelError> {
        self.check_sentence(target)?;
        self.check_lang(tgt_lang)?;
        let steps = target.len() + 1;
        if let Some(w) = token_weights {
            if w.len() != steps {
                return Err(ModelError::WeightLength {
                    expected: steps,
                    got: w.len(),
                });
            }
        }
        if let Some(g) = &grad_acc {
            if g.len() != self.layout.total {
                return Err(ModelError::GradLength {
                    expected: self.layout.total,
                    got: g.len(),
                });
            }
            if enc.cache.is_none() {
                return Err(ModelError::MissingCache);
            }
        }
        let d = self.config.model_dim;
        let record = grad_acc.is_some();

        let mut inputs = Vec::with_capacity(steps);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let mut targets_out: Sentence = target.to_vec();
        targets_out.push(EOS);

        let mut drop = Drop::new(self.config.dropout, dropout);
        let run = self.decoder_forward(enc, &inputs, tgt_lang, &mut drop, record);

        let uniform = 1.0 / steps as f64;
        let weight_at = |j: usize| token_weights.map_or(uniform, |w| w[j]);

        let mut token_nlls = Vec::with_capacity(steps);
        let mut loss = 0.0;
        let mut d_out = record.then(|| vec![0.0f64; steps * d]);
        for t in 0..steps {
            let state = &run.out[t * d..(t + 1) * d];
            let logits = self.logits_for_state(state);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + logits
                    .iter()
                    .map(|l| (l - max).exp())
                    .sum::<f64>()
                    .ln();
            let y = targets_out[t];
            let nll = lse - logits[y];
            token_nlls.push(nll);
            loss += weight_at(t) * nll;

            if let (Some(d_out), Some(grads)) = (&mut d_out, grad_acc.as_deref_mut()) {
                let w = sentence_weight * weight_at(t);
                // dlogits = w * (softmax - onehot); flows to the decoder
                // state and the tied embedding rows
                let emb = self.layout.tok_emb;
                let d_state = &mut d_out[t * d..(t + 1) * d];
                for (vi, l) in logits.iter().enumerate() {
                    let p = (*l - lse).exp();
                    let g = w * if vi == y { p - 1.0 } else { p };
                    if g == 0.0 {
                        continue;
                    }
                    let row = &self.params[emb + vi * d..emb + (vi + 1) * d];
                    let grow = &mut grads[emb + vi * d..emb + (vi + 1) * d];
                    for j in 0..d {
                        d_state[j] += g * row[j];
                        grow[j] += g * state[j];
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }

        if let (Some(d_out), Some(grads)) = (d_out, grad_acc) {
            let d_enc = self.decoder_backward(enc, &run, &inputs, tgt_lang, d_out, grads);
            self.encoder_backward(enc, d_enc, grads);
        }
        Ok(DecodeLossOutput { loss, token_nlls })
    }

    fn decoder_backward(
        &self,
        enc: &Encoded,
        run: &DecoderRun,
        inputs: &[TokenId],
        tgt_lang: usize,
        d_out: Vec<f64>,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let d = self.config.model_dim;
        let steps = run.steps;
        let cache = run.cache.as_ref().expect("decoder cache present");

        // final LN
        let mut dx = vec![0.0f64; steps * d];
        {
            let gamma = self.p(self.layout.dec_ln_gamma, d).to_vec();
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            layer_norm_bwd(
                &d_out, &cache.final_ln, &gamma, steps, d, &mut dgamma, &mut dbeta, &mut dx,
            );
            let (go, bo) = (self.layout.dec_ln_gamma, self.layout.dec_ln_beta);
            for (g, v) in grads[go..go + d].iter_mut().zip(&dgamma) {
                *g += v;
            }
            for (g, v) in grads[bo..bo + d].iter_mut().zip(&dbeta) {
                *g += v;
            }
        }
        let mut d_enc = vec![0.0f64; enc.n * d];
        for l in (0..self.config.layers).rev() {
            let off = self.layout.dec[l];
            let (sc, cc, fc) = &cache.layers[l];
            self.ffn_block_bwd(&off.ffn, d, self.config.ffn_dim, fc, steps, &mut dx, grads);
            let cross_in = AttnIn {
                off: &off.cross_attn,
                d,
                heads: self.config.heads,
                causal: false,
            };
            self.attn_block_bwd(
                &cross_in,
                cc,
                steps,
                Some((&enc.hidden, enc.n, &mut d_enc)),
                &mut dx,
                grads,
            );
            let self_in = AttnIn {
                off: &off.self_attn,
                d,
                heads: self.config.heads,
                causal: true,
            };
            self.attn_block_bwd(&self_in, sc, steps, None, &mut dx, grads);
        }

        if let Some(mask) = &cache.emb_drop {
            for (g, s) in dx.iter_mut().zip(mask) {
                *g *= s;
            }
        }
        self.embedding_backward(inputs, tgt_lang, &dx, grads);
        d_enc
    }

    fn encoder_backward(&self, enc: &Encoded, d_hidden: Vec<f64>, grads: &mut [f64]) {
        let d = self.config.model_dim;
        let n = enc.n;
        let cache = enc.cache.as_ref().expect("encoder cache present");

        let mut dx = vec![0.0f64; n * d];
        {
            let gamma = self.p(self.layout.enc_ln_gamma, d).to_vec();
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            layer_norm_bwd(
                &d_hidden, &cache.final_ln, &gamma, n, d, &mut dgamma, &mut dbeta, &mut dx,
            );
            let (go, bo) = (self.layout.enc_ln_gamma, self.layout.enc_ln_beta);
            for (g, v) in grads[go..go + d].iter_mut().zip(&dgamma) {
                *g += v;
            }
            for (g, v) in grads[bo..bo + d].iter_mut().zip(&dbeta) {
                *g += v;
            }
        }

        for l in (0..self.config.layers).rev() {
            let off = self.layout.enc[l];
            let (ac, fc) = &cache.layers[l];
            self.ffn_block_bwd(&off.ffn, d, self.config.ffn_dim, fc, n, &mut dx, grads);
            let attn_in = AttnIn {
                off: &off.attn,
                d,
                heads: self.config.heads,
                causal: false,
            };
            self.attn_block_bwd(&attn_in, ac, n, None, &mut dx, grads);
        }

        if let Some(mask) = &cache.emb_drop {
            for (g, s) in dx.iter_mut().zip(mask) {
                *g *= s;
            }
        }
        self.embedding_backward(&enc.ids, enc.lang, &dx, grads);
    }

    fn embedding_backward(&self, ids: &[TokenId], lang: usize, dx: &[f64], grads: &mut [f64]) {
        let d = self.config.model_dim;
        for (t, &id) in ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let tok = self.layout.tok_emb + id * d;
            let pos = self.layout.pos_emb + t * d;
            let lng = self.layout.lang_emb + lang * d;
            for j in 0..d {
                grads[tok + j] += row[j];
                grads[pos + j] += row[j];
                grads[lng + j] += row[j];
            }
        }
    }

    /// Force-decodes `target` (plus the end step) and returns the full
    /// next-token distribution at every step. Two calls with different
    /// dropout seeds give the two passes the agreement estimator needs.
    pub fn forward_distributions(
        &self,
        enc: &Encoded,
        target: &[TokenId],
        tgt_lang: usize,
        dropout: DropoutMode,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_sentence(target)?;
        self.check_lang(tgt_lang)?;
        let d = self.config.model_dim;
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let mut drop = Drop::new(self.config.dropout, dropout);
        let run = self.decoder_forward(enc, &inputs, tgt_lang, &mut drop, false);
        Ok((0..run.steps)
            .map(|t| {
                let mut logits = self.logits_for_state(&run.out[t * d..(t + 1) * d]);
                softmax_rows_inplace(&mut logits);
                logits
            })
            .collect())
    }

    /// Log-probabilities of the next token given the generated prefix.
    /// Inference mode: no dropout.
    pub fn next_token_logprobs(
        &self,
        enc: &Encoded,
        prefix: &[TokenId],
        tgt_lang: usize,
    ) -> Vec<f64> {
        let d = self.config.model_dim;
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let mut drop = Drop::new(self.config.dropout, DropoutMode::Off);
        let run = self.decoder_forward(enc, &inputs, tgt_lang, &mut drop, false);
        let last = run.steps - 1;
        let logits = self.logits_for_state(&run.out[last * d..(last + 1) * d]);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NUM_SPECIALS;
    use crate::seq2seq::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            dropout: 0.1,
            max_len: 8,
            vocab_size: 24,
            num_languages: 2,
            seed,
        })
        .unwrap()
    }

    fn tok(i: usize) -> TokenId {
        NUM_SPECIALS + i
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let model = tiny_model(5);
        let src: Vec<TokenId> = vec![tok(1), tok(2), tok(3)];
        let tgt: Vec<TokenId> = vec![tok(4), tok(5), tok(6), tok(7)];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let out = model
            .decode_loss(&enc, &tgt, 1, DropoutMode::Off, None, 1.0, None)
            .unwrap();
        let uniform_nll = (model.config.vocab_size as f64).ln();
        let mean_nll: f64 = out.token_nlls.iter().sum::<f64>() / out.token_nlls.len() as f64;
        assert!(
            (mean_nll - uniform_nll).abs() / uniform_nll < 0.02,
            "mean NLL {mean_nll} should be near ln(V) = {uniform_nll}"
        );
    }

    #[test]
    fn uniform_weights_match_unweighted_bitwise() {
        let model = tiny_model(9);
        let src = vec![tok(0), tok(1)];
        let tgt = vec![tok(2), tok(3), tok(4)];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let steps = tgt.len() + 1;
        let uniform = vec![1.0 / steps as f64; steps];
        let a = model
            .decode_loss(&enc, &tgt, 1, DropoutMode::Off, None, 1.0, None)
            .unwrap();
        let b = model
            .decode_loss(&enc, &tgt, 1, DropoutMode::Off, Some(&uniform), 1.0, None)
            .unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn distributions_are_normalized_and_reproducible() {
        let model = tiny_model(3);
        let src = vec![tok(1), tok(2), tok(3)];
        let tgt = vec![tok(4), tok(5)];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let a = model
            .forward_distributions(&enc, &tgt, 1, DropoutMode::Off)
            .unwrap();
        let b = model
            .forward_distributions(&enc, &tgt, 1, DropoutMode::Off)
            .unwrap();
        assert_eq!(a.len(), tgt.len() + 1);
        for (da, db) in a.iter().zip(&b) {
            let sum: f64 = da.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(da, db, "no dropout means identical passes");
        }
        // different dropout seeds give different distributions
        let d1 = model
            .forward_distributions(&enc, &tgt, 1, DropoutMode::On { seed: 1 })
            .unwrap();
        let d2 = model
            .forward_distributions(&enc, &tgt, 1, DropoutMode::On { seed: 2 })
            .unwrap();
        assert_ne!(d1, d2);
        // zero dropout rate with dropout on equals dropout off
        let mut cfg = model.config.clone();
        cfg.dropout = 0.0;
        let m0 = Model::new(cfg).unwrap();
        let e0 = m0.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let on = m0
            .forward_distributions(&e0, &tgt, 1, DropoutMode::On { seed: 11 })
            .unwrap();
        let off = m0
            .forward_distributions(&e0, &tgt, 1, DropoutMode::Off)
            .unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn greedy_is_deterministic_and_capped() {
        let model = tiny_model(17);
        let src = vec![tok(1), tok(4), tok(2)];
        let a = model.greedy_translate(&src, 0, 1, 8).unwrap();
        let b = model.greedy_translate(&src, 0, 1, 8).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let capped = model.greedy_translate(&src, 0, 1, 1).unwrap();
        assert_eq!(capped.len(), 1);
    }

    #[test]
    fn beam_one_equals_greedy_on_real_models() {
        for seed in [2, 7, 23, 41] {
            let model = tiny_model(seed);
            let src = vec![tok(3), tok(1), tok(8), tok(2)];
            let greedy = model.greedy_translate(&src, 0, 1, 8).unwrap();
            let beam = model.beam_translate(&src, 0, 1, 1, 1.0, 8).unwrap();
            assert_eq!(greedy, beam, "seed {seed}");
        }
    }

    #[test]
    fn weight_length_is_validated() {
        let model = tiny_model(1);
        let src = vec![tok(0)];
        let tgt = vec![tok(1), tok(2)];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let bad = vec![0.5; 2]; // needs 3 entries (2 tokens + end step)
        assert!(matches!(
            model.decode_loss(&enc, &tgt, 1, DropoutMode::Off, Some(&bad), 1.0, None),
            Err(ModelError::WeightLength { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn grads_require_recorded_encoder() {
        let model = tiny_model(1);
        let src = vec![tok(0)];
        let tgt = vec![tok(1)];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let mut grads = model.zero_grads();
        assert!(matches!(
            model.decode_loss(
                &enc,
                &tgt,
                1,
                DropoutMode::Off,
                None,
                1.0,
                Some(&mut grads)
            ),
            Err(ModelError::MissingCache)
        ));
    }

    /// Central finite differences against the analytic gradient on a
    /// handful of entries per parameter group, with non-uniform token
    /// weights and a sentence weight in play.
    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model(77);
        let src = vec![tok(2), tok(9), tok(1), tok(11), tok(5)];
        let tgt = vec![tok(7), tok(3), tok(12), tok(0)];
        let steps = tgt.len() + 1;
        let raw: Vec<f64> = (0..steps).map(|j| 0.5 + 0.17 * j as f64).collect();
        let alpha = crate::quality::softmax(&raw);
        let beta = 0.85;

        let enc = model.encode(&src, 0, DropoutMode::Off, true).unwrap();
        let mut grads = model.zero_grads();
        model
            .decode_loss(
                &enc,
                &tgt,
                1,
                DropoutMode::Off,
                Some(&alpha),
                beta,
                Some(&mut grads),
            )
            .unwrap();

        let eval = |params: &[f64]| -> f64 {
            let mut m = model.clone();
            m.params = params.to_vec();
            let e = m.encode(&src, 0, DropoutMode::Off, false).unwrap();
            let out = m
                .decode_loss(&e, &tgt, 1, DropoutMode::Off, Some(&alpha), 1.0, None)
                .unwrap();
            beta * out.loss
        };

        let mut params = model.params.clone();
        let mut worst: (f64, String) = (0.0, String::new());
        for g in &model.layout.groups {
            // first, last, and two interior entries per group
            let picks = [0, g.len / 3, 2 * g.len / 3, g.len - 1];
            for &p in &picks {
                let idx = g.offset + p.min(g.len - 1);
                let theta = params[idx];
                let h = 1e-5 * theta.abs().max(1.0);
                params[idx] = theta + h;
                let up = eval(&params);
                params[idx] = theta - h;
                let down = eval(&params);
                params[idx] = theta;
                let fd = (up - down) / (2.0 * h);
                let an = grads[idx];
                if an.abs() < 1e-10 && fd.abs() < 1e-10 {
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs());
                if rel > worst.0 {
                    worst = (rel, format!("{}[{}]", g.name, p));
                }
                assert!(
                    rel <= 1e-3,
                    "group {} entry {p}: analytic {an} vs fd {fd} (rel {rel})",
                    g.name
                );
            }
        }
        eprintln!("worst relative error {:.3e} at {}", worst.0, worst.1);
    }
}

// ---------------------------------------------------------------------
// incremental (KV-cached) decoding
// ---------------------------------------------------------------------

/// Decoder step state for one hypothesis: the self-attention keys and
/// values of every position fed so far.
#[derive(Debug, Clone)]
pub struct DecoderStepState {
    /// Per layer: (keys, values), each `len x d` flat.
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

/// Inference-mode decoder with cached cross-attention keys/values.
///
/// Feeding tokens one at a time through [`IncrementalDecoder::advance`]
/// produces exactly the same logits as re-running the full forward pass
/// over the prefix (the per-position arithmetic is identical), at a
/// fraction of the cost.
pub struct IncrementalDecoder<'a> {
    model: &'a Model,
    enc: &'a Encoded,
    tgt_lang: usize,
    /// Per layer: cross-attention (keys, values) over the encoder
    /// output, `m x d` flat.
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

fn ln_row(x: &mut [f64], gamma: &[f64], beta: &[f64]) {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let r = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..d {
        x[j] = gamma[j] * (x[j] - mean) * r + beta[j];
    }
}

/// Single-row `x * w + b` with the same accumulation order as
/// [`linear_fwd`].
fn linear_row(x: &[f64], din: usize, dout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let w_row = &w[k * dout..(k + 1) * dout];
        for o in 0..dout {
            out[o] += xv * w_row[o];
        }
    }
    debug_assert_eq!(x.len(), din);
    out
}

impl Model {
    /// Prepares incremental decoding against `enc` (inference mode).
    pub fn incremental_decoder<'a>(
        &'a self,
        enc: &'a Encoded,
        tgt_lang: usize,
    ) -> IncrementalDecoder<'a> {
        let d = self.config.model_dim;
        let cross_kv = self
            .layout
            .dec
            .iter()
            .map(|off| {
                let k = linear_fwd(
                    &enc.hidden,
                    enc.n,
                    d,
                    d,
                    self.p(off.cross_attn.wk, d * d),
                    self.p(off.cross_attn.bk, d),
                );
                let v = linear_fwd(
                    &enc.hidden,
                    enc.n,
                    d,
                    d,
                    self.p(off.cross_attn.wv, d * d),
                    self.p(off.cross_attn.bv, d),
                );
                (k, v)
            })
            .collect();
        IncrementalDecoder {
            model: self,
            enc,
            tgt_lang,
        cross_kv,
        }
    }
}

impl IncrementalDecoder<'_> {
    pub fn start(&self) -> DecoderStepState {
        DecoderStepState {
            self_kv: vec![(Vec::new(), Vec::new()); self.model.config.layers],
            len: 0,
        }
    }

    fn attend_row(
        q: &[f64],
        keys: &[f64],
        values: &[f64],
        m: usize,
        d: usize,
        heads: usize,
    ) -> Vec<f64> {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0f64; d];
        let mut scores = vec![0.0f64; m];
        for hd in 0..heads {
            let col = hd * dh;
            let q_h = &q[col..col + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let k_h = &keys[j * d + col..j * d + col + dh];
                *s = scale * q_h.iter().zip(k_h).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_rows_inplace(&mut scores);
            let ctx_h = &mut ctx[col..col + dh];
            for (j, &p) in scores.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v_h = &values[j * d + col..j * d + col + dh];
                for c in 0..dh {
                    ctx_h[c] += p * v_h[c];
                }
            }
        }
        ctx
    }

    /// Feeds `input` (the start symbol first, then each emitted token)
    /// and returns the log-probabilities of the next token.
    pub fn advance(&self, state: &mut DecoderStepState, input: TokenId) -> Vec<f64> {
        let model = self.model;
        let d = model.config.model_dim;
        let heads = model.config.heads;
        let f = model.config.ffn_dim;
        let pos = state.len;
        state.len += 1;

        // embedding row
        let mut x = vec![0.0f64; d];
        let tok = model.p(model.layout.tok_emb + input * d, d);
        let pe = model.p(model.layout.pos_emb + pos * d, d);
        let lang = model.p(model.layout.lang_emb + self.tgt_lang * d, d);
        for j in 0..d {
            x[j] = tok[j] + pe[j] + lang[j];
        }

        for (l, off) in model.layout.dec.iter().enumerate() {
            // self-attention with the appended cache
            let mut h = x.clone();
            ln_row(
                &mut h,
                model.p(off.self_attn.ln_gamma, d),
                model.p(off.self_attn.ln_beta, d),
            );
            let q = linear_row(&h, d, d, model.p(off.self_attn.wq, d * d), model.p(off.self_attn.bq, d));
            let k = linear_row(&h, d, d, model.p(off.self_attn.wk, d * d), model.p(off.self_attn.bk, d));
            let v = linear_row(&h, d, d, model.p(off.self_attn.wv, d * d), model.p(off.self_attn.bv, d));
            let (keys, values) = &mut state.self_kv[l];
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);
            let ctx = Self::attend_row(&q, keys, values, pos + 1, d, heads);
            let out = linear_row(&ctx, d, d, model.p(off.self_attn.wo, d * d), model.p(off.self_attn.bo, d));
            for j in 0..d {
                x[j] += out[j];
            }

            // cross-attention against the precomputed encoder keys/values
            let mut c = x.clone();
            ln_row(
                &mut c,
                model.p(off.cross_attn.ln_gamma, d),
                model.p(off.cross_attn.ln_beta, d),
            );
            let q2 = linear_row(&c, d, d, model.p(off.cross_attn.wq, d * d), model.p(off.cross_attn.bq, d));
            let (ck, cv) = &self.cross_kv[l];
            let ctx2 = Self::attend_row(&q2, ck, cv, self.enc.n, d, heads);
            let out2 = linear_row(&ctx2, d, d, model.p(off.cross_attn.wo, d * d), model.p(off.cross_attn.bo, d));
            for j in 0..d {
                x[j] += out2[j];
            }

            // feed-forward
            let mut g = x.clone();
            ln_row(
                &mut g,
                model.p(off.ffn.ln_gamma, d),
                model.p(off.ffn.ln_beta, d),
            );
            let mut act = linear_row(&g, d, f, model.p(off.ffn.w1, d * f), model.p(off.ffn.b1, f));
            for a in act.iter_mut() {
                if *a < 0.0 {
                    *a = 0.0;
                }
            }
            let out3 = linear_row(&act, f, d, model.p(off.ffn.w2, f * d), model.p(off.ffn.b2, d));
            for j in 0..d {
                x[j] += out3[j];
            }
        }

        ln_row(
            &mut x,
            model.p(model.layout.dec_ln_gamma, d),
            model.p(model.layout.dec_ln_beta, d),
        );
        let logits = model.logits_for_state(&x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

#[cfg(test)]
mod incremental_tests {
    use super::*;
    use crate::corpus::NUM_SPECIALS;
    use crate::seq2seq::ModelConfig;

    #[test]
    fn incremental_decoder_matches_full_forward_bitwise() {
        let model = Model::new(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            dropout: 0.1,
            max_len: 10,
            vocab_size: 24,
            num_languages: 2,
            seed: 21,
        })
        .unwrap();
        let src: Vec<TokenId> = vec![NUM_SPECIALS + 3, NUM_SPECIALS + 8, NUM_SPECIALS + 1];
        let enc = model.encode(&src, 0, DropoutMode::Off, false).unwrap();
        let dec = model.incremental_decoder(&enc, 1);
        let mut state = dec.start();
        let prefix_tokens = [NUM_SPECIALS + 5, NUM_SPECIALS + 2, NUM_SPECIALS + 9];
        let mut prefix: Vec<TokenId> = Vec::new();
        let mut lp = dec.advance(&mut state, BOS);
        for &tok in &prefix_tokens {
            let full = model.next_token_logprobs(&enc, &prefix, 1);
            let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
            assert_eq!(bits(&lp), bits(&full), "prefix {prefix:?}");
            prefix.push(tok);
            lp = dec.advance(&mut state, tok);
        }
        let full = model.next_token_logprobs(&enc, &prefix, 1);
        assert_eq!(
            lp.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            full.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
