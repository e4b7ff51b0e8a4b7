//! Forward computation over the concatenated `[scene, context, response]`
//! sequence, with an optional activation tape for backprop and an optional
//! prompt key/value cache for repeated decoding calls.

use super::params::{LayerNorm, Linear, Weights};
use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::{ModelConfig, ModelError, ModelInput};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    /// Every position sees every position.
    Full,
    /// Prompt rows see only the prompt; response row `i` sees the prompt and
    /// response rows `<= i`.
    Causal,
}

impl Attention {
    #[inline]
    fn allowed(self, prompt_len: usize, query: usize, key: usize) -> bool {
        match self {
            Attention::Full => true,
            Attention::Causal => {
                if query < prompt_len {
                    key < prompt_len
                } else {
                    key <= query
                }
            }
        }
    }
}

/// Per-layer `[prompt_len, 3·d]` query/key/value rows of the prompt.
#[derive(Debug, Clone, Default)]
pub struct PromptCache<T> {
    layers: Vec<Vec<T>>,
}

impl<T> PromptCache<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn is_filled(&self) -> bool {
        !self.layers.is_empty()
    }

    pub fn clear(&mut self) {
        self.layers.clear();
    }
}

pub(crate) enum CacheUse<'a, T> {
    None,
    Fill(&'a mut PromptCache<T>),
    Reuse(&'a PromptCache<T>),
}

pub(crate) struct LnTape<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) struct BlockTape<T> {
    pub ln_attn_out: Vec<T>,
    pub ln_attn: LnTape<T>,
    pub qkv: Vec<T>,
    /// `[heads, rows, seq]` attention weights.
    pub attn: Vec<T>,
    pub ctx: Vec<T>,
    pub ln_ff_out: Vec<T>,
    pub ln_ff: LnTape<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
}

pub(crate) struct Tape<T> {
    pub patches: Vec<T>,
    pub patch_out: Vec<T>,
    pub conn_pre: Vec<T>,
    pub conn_act: Vec<T>,
    pub blocks: Vec<BlockTape<T>>,
    pub final_out: Vec<T>,
    pub ln_final: LnTape<T>,
}

pub(crate) struct PassOutput<T> {
    /// `[response_len, vocab]` logits.
    pub logits: Vec<T>,
    pub tape: Option<Tape<T>>,
}

pub(crate) fn check_input(cfg: &ModelConfig, input: &ModelInput<'_>) -> Result<(), ModelError> {
    let s = input.scene;
    if s.channels != cfg.channels || s.height != cfg.raster_height || s.width != cfg.raster_width {
        return Err(ModelError::DimensionMismatch(format!(
            "raster {}x{}x{} but model expects {}x{}x{}",
            s.channels, s.height, s.width, cfg.channels, cfg.raster_height, cfg.raster_width
        )));
    }
    if s.data.len() != s.channels * s.height * s.width {
        return Err(ModelError::DimensionMismatch("raster buffer length".into()));
    }
    if input.context.len() != cfg.context_len {
        return Err(ModelError::DimensionMismatch(format!(
            "context has {} tokens, model expects {}",
            input.context.len(),
            cfg.context_len
        )));
    }
    if input.response.len() != cfg.response_len {
        return Err(ModelError::DimensionMismatch(format!(
            "response has {} tokens, model expects {}",
            input.response.len(),
            cfg.response_len
        )));
    }
    let bad_id = input
        .context
        .iter()
        .chain(input.response.ids())
        .find(|id| id.index() >= cfg.vocab_size);
    if let Some(id) = bad_id {
        return Err(ModelError::DimensionMismatch(format!(
            "token id {id} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Channel-major patch features, patches in row-major raster order.
pub(crate) fn patchify<T: Scalar>(cfg: &ModelConfig, input: &ModelInput<'_>) -> Vec<T> {
    let s = input.scene;
    let p = cfg.patch;
    let cols = s.width / p;
    let features = cfg.patch_features();
    let mut out = vec![T::zero(); cfg.patch_count() * features];
    for patch in 0..cfg.patch_count() {
        let (pr, pc) = (patch / cols, patch % cols);
        let row = &mut out[patch * features..(patch + 1) * features];
        let mut f = 0;
        for ch in 0..s.channels {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (pr * p + dy, pc * p + dx);
                    row[f] = T::lit(s.data[(ch * s.height + y) * s.width + x] as f64);
                    f += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, l: &Linear<T>) -> Vec<T> {
    let (fin, fout) = (l.fan_in(), l.fan_out());
    let mut y = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        y.extend_from_slice(&l.b.data);
    }
    gemm(
        MatRef::new(x, rows, fin),
        MatRef::new(&l.w.data, fin, fout),
        MatMut::new(&mut y, rows, fout),
        true,
    );
    y
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], width: usize, ln: &LayerNorm<T>) -> (Vec<T>, LnTape<T>) {
    let rows = x.len() / width;
    let inv_w = T::lit(1.0 / width as f64);
    let eps = T::lit(LN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (row[c] - mean) * rs;
            xhat[r * width + c] = h;
            out[r * width + c] = h * ln.gamma.data[c] + ln.beta.data[c];
        }
    }
    (out, LnTape { xhat, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Runs the model. With `CacheUse::Reuse` only response rows are computed;
/// prompt keys/values come from the cache.
pub(crate) fn run<T: Scalar>(
    cfg: &ModelConfig,
    w: &Weights<T>,
    input: &ModelInput<'_>,
    attention: Attention,
    cache: CacheUse<'_, T>,
    record: bool,
) -> PassOutput<T> {
    let d = cfg.d_model;
    let seq = cfg.sequence_len();
    let prompt = cfg.prompt_len();
    let patches_n = cfg.patch_count();

    let (reuse, mut fill) = match cache {
        CacheUse::None => (None, None),
        CacheUse::Fill(c) => {
            c.layers.clear();
            (None, Some(c))
        }
        CacheUse::Reuse(c) => {
            assert!(c.is_filled(), "prompt cache reused before being filled");
            (Some(c), None)
        }
    };
    assert!(!(record && reuse.is_some()), "cannot record a tape through a reused cache");
    let first_row = if reuse.is_some() { prompt } else { 0 };
    let rows = seq - first_row;

    let mut tape = record.then(|| Tape {
        patches: Vec::new(),
        patch_out: Vec::new(),
        conn_pre: Vec::new(),
        conn_act: Vec::new(),
        blocks: Vec::with_capacity(cfg.blocks),
        final_out: Vec::new(),
        ln_final: LnTape {
            xhat: Vec::new(),
            rstd: Vec::new(),
        },
    });

    // Embedding rows first_row..seq.
    let mut x = vec![T::zero(); rows * d];
    if first_row == 0 {
        let patches = patchify::<T>(cfg, input);
        let patch_out = linear(&patches, patches_n, &w.patch_embed);
        let conn_pre = linear(&patch_out, patches_n, &w.connector_in);
        let conn_act: Vec<T> = conn_pre.iter().map(|&v| gelu(v)).collect();
        let projected = linear(&conn_act, patches_n, &w.connector_out);
        x[..patches_n * d].copy_from_slice(&projected);
        if let Some(t) = tape.as_mut() {
            t.patches = patches;
            t.patch_out = patch_out;
            t.conn_pre = conn_pre;
            t.conn_act = conn_act;
        }
        for (i, id) in input.context.iter().enumerate() {
            let src = &w.token_embed.data[id.index() * d..(id.index() + 1) * d];
            x[(patches_n + i) * d..(patches_n + i + 1) * d].copy_from_slice(src);
        }
    }
    for (i, id) in input.response.ids().iter().enumerate() {
        let row = prompt + i - first_row;
        let src = &w.token_embed.data[id.index() * d..(id.index() + 1) * d];
        x[row * d..(row + 1) * d].copy_from_slice(src);
    }
    for r in 0..rows {
        let pos = &w.pos_embed.data[(first_row + r) * d..(first_row + r + 1) * d];
        for (v, p) in x[r * d..(r + 1) * d].iter_mut().zip(pos) {
            *v += *p;
        }
    }

    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let three_d = 3 * d;

    for (layer, block) in w.blocks.iter().enumerate() {
        let (h, ln_attn) = layer_norm(&x, d, &block.ln_attn);
        let qkv_rows = linear(&h, rows, &block.qkv);
        let qkv: Vec<T> = match reuse {
            Some(c) => {
                let mut full = Vec::with_capacity(seq * three_d);
                full.extend_from_slice(&c.layers[layer]);
                full.extend_from_slice(&qkv_rows);
                full
            }
            None => {
                if let Some(c) = fill.as_mut() {
                    c.layers.push(qkv_rows[..prompt * three_d].to_vec());
                }
                qkv_rows
            }
        };

        let mut attn = vec![T::zero(); heads * rows * seq];
        let mut ctx = vec![T::zero(); rows * d];
        for head in 0..heads {
            let scores = &mut attn[head * rows * seq..(head + 1) * rows * seq];
            let q = MatRef::strided(&qkv, first_row * three_d + head * hd, rows, hd, three_d, 1);
            let k = MatRef::strided(&qkv, d + head * hd, seq, hd, three_d, 1);
            gemm(q, k.t(), MatMut::new(scores, rows, seq), false);
            for r in 0..rows {
                let query = first_row + r;
                let row = &mut scores[r * seq..(r + 1) * seq];
                let mut max = T::neg_infinity();
                for (key, s) in row.iter_mut().enumerate() {
                    if attention.allowed(prompt, query, key) {
                        *s *= scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                }
                let mut total = T::zero();
                for (key, s) in row.iter_mut().enumerate() {
                    if attention.allowed(prompt, query, key) {
                        *s = (*s - max).exp();
                        total += *s;
                    } else {
                        *s = T::zero();
                    }
                }
                let inv = T::one() / total;
                row.iter_mut().for_each(|s| *s *= inv);
            }
            let v = MatRef::strided(&qkv, 2 * d + head * hd, seq, hd, three_d, 1);
            gemm(
                MatRef::new(scores, rows, seq),
                v,
                MatMut::strided(&mut ctx, head * hd, rows, hd, d, 1),
                false,
            );
        }
        let attn_proj = linear(&ctx, rows, &block.attn_out);
        for (xv, a) in x.iter_mut().zip(&attn_proj) {
            *xv += *a;
        }

        let (h2, ln_ff) = layer_norm(&x, d, &block.ln_ff);
        let ff_pre = linear(&h2, rows, &block.ff_in);
        let ff_act: Vec<T> = ff_pre.iter().map(|&v| gelu(v)).collect();
        let ff_out = linear(&ff_act, rows, &block.ff_out);
        for (xv, f) in x.iter_mut().zip(&ff_out) {
            *xv += *f;
        }

        if let Some(t) = tape.as_mut() {
            t.blocks.push(BlockTape {
                ln_attn_out: h,
                ln_attn,
                qkv,
                attn,
                ctx,
                ln_ff_out: h2,
                ln_ff,
                ff_pre,
                ff_act,
            });
        }
    }

    let resp_offset = (prompt - first_row) * d;
    let (final_out, ln_final) = layer_norm(&x[resp_offset..], d, &w.ln_final);
    let logits = linear(&final_out, cfg.response_len, &w.head);
    if let Some(t) = tape.as_mut() {
        t.final_out = final_out;
        t.ln_final = ln_final;
    }
    PassOutput { logits, tape }
}

/// Row-wise softmax of `[rows, width]` logits.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn causal_rule() {
        let a = Attention::Causal;
        // prompt of 3
        assert!(a.allowed(3, 0, 2));
        assert!(!a.allowed(3, 0, 3));
        assert!(a.allowed(3, 4, 0));
        assert!(a.allowed(3, 4, 4));
        assert!(!a.allowed(3, 4, 5));
        assert!(Attention::Full.allowed(3, 0, 9));
    }
}
