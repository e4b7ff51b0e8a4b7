//! Reverse-mode gradients for a recorded full pass.

use super::params::{LayerNorm, Linear, Weights};
use super::pass::{gelu_grad, LnTape, Tape};
use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::{ModelConfig, ModelInput};

/// Accumulates `dW`, `db` and returns `dx` for `y = x·w + b`.
fn linear_back<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    l: &Linear<T>,
    grad: &mut Linear<T>,
    need_dx: bool,
) -> Vec<T> {
    let (fin, fout) = (l.fan_in(), l.fan_out());
    gemm(
        MatRef::new(x, rows, fin).t(),
        MatRef::new(dy, rows, fout),
        MatMut::new(&mut grad.w.data, fin, fout),
        true,
    );
    for r in 0..rows {
        for (g, v) in grad.b.data.iter_mut().zip(&dy[r * fout..(r + 1) * fout]) {
            *g += *v;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * fin];
    gemm(
        MatRef::new(dy, rows, fout),
        MatRef::new(&l.w.data, fin, fout).t(),
        MatMut::new(&mut dx, rows, fin),
        false,
    );
    dx
}

fn layer_norm_back<T: Scalar>(dy: &[T], width: usize, tape: &LnTape<T>, ln: &LayerNorm<T>, grad: &mut LayerNorm<T>) -> Vec<T> {
    let rows = dy.len() / width;
    let inv_w = T::lit(1.0 / width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &tape.xhat[r * width..(r + 1) * width];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..width {
            grad.gamma.data[c] += dyr[c] * xh[c];
            grad.beta.data[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gamma.data[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d *= inv_w;
        mean_dx *= inv_w;
        let rs = tape.rstd[r];
        for c in 0..width {
            dx[r * width + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

/// Gradient of a scalar loss with respect to every parameter, given
/// `dlogits = ∂loss/∂logits` for the response rows.
pub(crate) fn backward<T: Scalar>(
    cfg: &ModelConfig,
    w: &Weights<T>,
    input: &ModelInput<'_>,
    tape: &Tape<T>,
    dlogits: &[T],
) -> Weights<T> {
    let d = cfg.d_model;
    let seq = cfg.sequence_len();
    let prompt = cfg.prompt_len();
    let patches_n = cfg.patch_count();
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let three_d = 3 * d;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut g = Weights::zeros(cfg);

    let dfinal = linear_back(&tape.final_out, dlogits, cfg.response_len, &w.head, &mut g.head, true);
    let dresp = layer_norm_back(&dfinal, d, &tape.ln_final, &w.ln_final, &mut g.ln_final);
    let mut dx = vec![T::zero(); seq * d];
    dx[prompt * d..].copy_from_slice(&dresp);

    for (layer, block) in w.blocks.iter().enumerate().rev() {
        let bt = &tape.blocks[layer];
        let gb = &mut g.blocks[layer];

        // Feed-forward branch; dx flows through the residual unchanged.
        let dact = linear_back(&bt.ff_act, &dx, seq, &block.ff_out, &mut gb.ff_out, true);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&bt.ff_pre)
            .map(|(&g, &x)| g * gelu_grad(x))
            .collect();
        let dh2 = linear_back(&bt.ln_ff_out, &dpre, seq, &block.ff_in, &mut gb.ff_in, true);
        let dres = layer_norm_back(&dh2, d, &bt.ln_ff, &block.ln_ff, &mut gb.ln_ff);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }

        // Attention branch.
        let dctx = linear_back(&bt.ctx, &dx, seq, &block.attn_out, &mut gb.attn_out, true);
        let mut dqkv = vec![T::zero(); seq * three_d];
        let mut dscores = vec![T::zero(); seq * seq];
        for head in 0..heads {
            let probs = &bt.attn[head * seq * seq..(head + 1) * seq * seq];
            let dctx_h = MatRef::strided(&dctx, head * hd, seq, hd, d, 1);
            let v = MatRef::strided(&bt.qkv, 2 * d + head * hd, seq, hd, three_d, 1);
            // dP = dctx · Vᵀ
            gemm(dctx_h, v.t(), MatMut::new(&mut dscores, seq, seq), false);
            // dV = Pᵀ · dctx
            gemm(
                MatRef::new(probs, seq, seq).t(),
                dctx_h,
                MatMut::strided(&mut dqkv, 2 * d + head * hd, seq, hd, three_d, 1),
                false,
            );
            // Softmax backward, folded with the 1/sqrt(hd) score scale.
            for r in 0..seq {
                let p = &probs[r * seq..(r + 1) * seq];
                let ds = &mut dscores[r * seq..(r + 1) * seq];
                let dot: T = p.iter().zip(ds.iter()).map(|(&a, &b)| a * b).sum();
                for (s, &pv) in ds.iter_mut().zip(p) {
                    *s = pv * (*s - dot) * scale;
                }
            }
            let q = MatRef::strided(&bt.qkv, head * hd, seq, hd, three_d, 1);
            let k = MatRef::strided(&bt.qkv, d + head * hd, seq, hd, three_d, 1);
            // dQ = dS · K, dK = dSᵀ · Q
            gemm(
                MatRef::new(&dscores, seq, seq),
                k,
                MatMut::strided(&mut dqkv, head * hd, seq, hd, three_d, 1),
                false,
            );
            gemm(
                MatRef::new(&dscores, seq, seq).t(),
                q,
                MatMut::strided(&mut dqkv, d + head * hd, seq, hd, three_d, 1),
                false,
            );
        }
        let dh = linear_back(&bt.ln_attn_out, &dqkv, seq, &block.qkv, &mut gb.qkv, true);
        let dres = layer_norm_back(&dh, d, &bt.ln_attn, &block.ln_attn, &mut gb.ln_attn);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }
    }

    // Embedding gradients.
    for r in 0..seq {
        for c in 0..d {
            g.pos_embed.data[r * d + c] += dx[r * d + c];
        }
    }
    let token_rows = input
        .context
        .iter()
        .enumerate()
        .map(|(i, id)| (patches_n + i, *id))
        .chain(
            input
                .response
                .ids()
                .iter()
                .enumerate()
                .map(|(i, id)| (prompt + i, *id)),
        );
    for (row, id) in token_rows {
        let dst = &mut g.token_embed.data[id.index() * d..(id.index() + 1) * d];
        for (a, b) in dst.iter_mut().zip(&dx[row * d..(row + 1) * d]) {
            *a += *b;
        }
    }
    let dproj = &dx[..patches_n * d];
    let dact = linear_back(&tape.conn_act, dproj, patches_n, &w.connector_out, &mut g.connector_out, true);
    let dpre: Vec<T> = dact
        .iter()
        .zip(&tape.conn_pre)
        .map(|(&g, &x)| g * gelu_grad(x))
        .collect();
    let dpatch = linear_back(&tape.patch_out, &dpre, patches_n, &w.connector_in, &mut g.connector_in, true);
    linear_back(&tape.patches, &dpatch, patches_n, &w.patch_embed, &mut g.patch_embed, false);
    g
}
