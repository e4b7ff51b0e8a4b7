use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| T::lit(dist.sample(rng)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// `y = x·w + b` with `w` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn init(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], T::one()),
            beta: Tensor::zeros(&[width]),
        }
    }

    fn zeros(width: usize) -> Self {
        Self {
            gamma: Tensor::zeros(&[width]),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_attn: LayerNorm<T>,
    /// Fused query/key/value projection, `[d, 3d]`.
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln_ff: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

/// Every learnable tensor of a [`super::MaskPredictor`]. Also used as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// Raster patch → `d_model`; stands in for a vision encoder.
    pub patch_embed: Linear<T>,
    /// Two-layer connector projecting patch features into the token space.
    pub connector_in: Linear<T>,
    pub connector_out: Linear<T>,
    pub token_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Weights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.blocks)
            .map(|_| {
                let mut attn_out = Linear::init(d, d, rng);
                let mut ff_out = Linear::init(cfg.ff_width, d, rng);
                // Residual branches start small so depth does not blow up
                // the activations.
                let residual_scale = T::lit(1.0 / (2.0 * cfg.blocks as f64).sqrt());
                attn_out.w.data.iter_mut().for_each(|v| *v *= residual_scale);
                ff_out.w.data.iter_mut().for_each(|v| *v *= residual_scale);
                Block {
                    ln_attn: LayerNorm::init(d),
                    qkv: Linear::init(d, 3 * d, rng),
                    attn_out,
                    ln_ff: LayerNorm::init(d),
                    ff_in: Linear::init(d, cfg.ff_width, rng),
                    ff_out,
                }
            })
            .collect();
        Self {
            patch_embed: Linear::init(cfg.patch_features(), d, rng),
            connector_in: Linear::init(d, d, rng),
            connector_out: Linear::init(d, d, rng),
            token_embed: Tensor::normal(&[cfg.vocab_size, d], 0.5, rng),
            pos_embed: Tensor::normal(&[cfg.sequence_len(), d], 0.1, rng),
            blocks,
            ln_final: LayerNorm::init(d),
            head: Linear::init(d, cfg.vocab_size, rng),
        }
    }

    /// Same shapes as `cfg`, every entry zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            patch_embed: Linear::zeros(cfg.patch_features(), d),
            connector_in: Linear::zeros(d, d),
            connector_out: Linear::zeros(d, d),
            token_embed: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_embed: Tensor::zeros(&[cfg.sequence_len(), d]),
            blocks: (0..cfg.blocks)
                .map(|_| Block {
                    ln_attn: LayerNorm::zeros(d),
                    qkv: Linear::zeros(d, 3 * d),
                    attn_out: Linear::zeros(d, d),
                    ln_ff: LayerNorm::zeros(d),
                    ff_in: Linear::zeros(d, cfg.ff_width),
                    ff_out: Linear::zeros(cfg.ff_width, d),
                })
                .collect(),
            ln_final: LayerNorm::zeros(d),
            head: Linear::zeros(d, cfg.vocab_size),
        }
    }

    /// `(name, tensor)` for every parameter, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        fn lin<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, name: &str, l: &'a Linear<T>) {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        }
        lin(&mut out, "patch_embed", &self.patch_embed);
        lin(&mut out, "connector_in", &self.connector_in);
        lin(&mut out, "connector_out", &self.connector_out);
        out.push(("token_embed".into(), &self.token_embed));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln_attn.gamma"), &b.ln_attn.gamma));
            out.push((format!("blocks.{i}.ln_attn.beta"), &b.ln_attn.beta));
            lin(&mut out, &format!("blocks.{i}.qkv"), &b.qkv);
            lin(&mut out, &format!("blocks.{i}.attn_out"), &b.attn_out);
            out.push((format!("blocks.{i}.ln_ff.gamma"), &b.ln_ff.gamma));
            out.push((format!("blocks.{i}.ln_ff.beta"), &b.ln_ff.beta));
            lin(&mut out, &format!("blocks.{i}.ff_in"), &b.ff_in);
            lin(&mut out, &format!("blocks.{i}.ff_out"), &b.ff_out);
        }
        out.push(("ln_final.gamma".into(), &self.ln_final.gamma));
        out.push(("ln_final.beta".into(), &self.ln_final.beta));
        lin(&mut out, "head", &self.head);
        out
    }

    /// Mutable tensors in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_embed.w,
            &mut self.patch_embed.b,
            &mut self.connector_in.w,
            &mut self.connector_in.b,
            &mut self.connector_out.w,
            &mut self.connector_out.b,
            &mut self.token_embed,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln_attn.gamma);
            out.push(&mut b.ln_attn.beta);
            out.push(&mut b.qkv.w);
            out.push(&mut b.qkv.b);
            out.push(&mut b.attn_out.w);
            out.push(&mut b.attn_out.b);
            out.push(&mut b.ln_ff.gamma);
            out.push(&mut b.ln_ff.beta);
            out.push(&mut b.ff_in.w);
            out.push(&mut b.ff_in.b);
            out.push(&mut b.ff_out.w);
            out.push(&mut b.ff_out.b);
        }
        out.push(&mut self.ln_final.gamma);
        out.push(&mut self.ln_final.beta);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Weights<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let lin = |l: &Linear<T>| Linear {
            w: l.w.cast(),
            b: l.b.cast(),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: l.gamma.cast(),
            beta: l.beta.cast(),
        };
        Weights {
            patch_embed: lin(&self.patch_embed),
            connector_in: lin(&self.connector_in),
            connector_out: lin(&self.connector_out),
            token_embed: self.token_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln_attn: ln(&b.ln_attn),
                    qkv: lin(&b.qkv),
                    attn_out: lin(&b.attn_out),
                    ln_ff: ln(&b.ln_ff),
                    ff_in: lin(&b.ff_in),
                    ff_out: lin(&b.ff_out),
                })
                .collect(),
            ln_final: ln(&self.ln_final),
            head: lin(&self.head),
        }
    }
}
