//! Bidirectional transformer mask predictor with hand-written gradients.
//!
//! The input sequence is `[scene patches, context tokens, response tokens]`.
//! Scene patches pass through a linear patch encoder and a two-layer GELU
//! connector; tokens use a shared embedding table; learned absolute
//! positions cover the whole concatenation. The output head runs over
//! response positions only, giving one distribution per response slot.
//!
//! The same weights also run under a causal mask ([`MaskPredictor::forward_ar`])
//! for the left-to-right baseline decoder.

mod backward;
pub mod checkpoint;
mod config;
mod params;
mod pass;
mod scalar;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{TokenId, TokenSequence};

pub use config::ModelConfig;
pub use params::{Block, LayerNorm, Linear, Tensor, Weights};
pub use pass::{Attention, PromptCache};
pub use scalar::{gemm, MatMut, MatRef, Scalar};

use pass::{CacheUse, PassOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no masked positions in the response")]
    NoMaskedPositions,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid loss arguments: {0}")]
    InvalidLoss(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `channels × height × width` raster, values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRaster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SceneRaster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f32) {
        self.data[(ch * self.height + y) * self.width + x] = v;
    }
}

/// One model call's input.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub scene: &'a SceneRaster,
    pub context: &'a [TokenId],
    pub response: &'a TokenSequence,
}

/// `[rows, vocab]` probabilities, one row per response position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRows<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ProbRows<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// The mask predictor. `T` is `f32` for storage and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPredictor<T = f32> {
    config: ModelConfig,
    weights: Weights<T>,
}

impl<T: Scalar> MaskPredictor<T> {
    /// Random initialisation from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            weights: Weights::init(&config, &mut rng),
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expect = Weights::<T>::zeros(&config);
        let shapes_match = expect
            .tensors()
            .iter()
            .zip(weights.tensors())
            .all(|(a, b)| a.shape == b.shape)
            && expect.blocks.len() == weights.blocks.len();
        if !shapes_match {
            return Err(ModelError::DimensionMismatch("weights do not match config".into()));
        }
        Ok(Self { config, weights })
    }

    /// Zeroes the output head so every row is exactly uniform.
    pub fn zero_head(&mut self) {
        self.weights.head.w.data.iter_mut().for_each(|v| *v = T::zero());
        self.weights.head.b.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<T> {
        &mut self.weights
    }

    pub fn cast<U: Scalar>(&self) -> MaskPredictor<U> {
        MaskPredictor {
            config: self.config,
            weights: self.weights.cast(),
        }
    }

    pub(crate) fn run(
        &self,
        input: &ModelInput<'_>,
        attention: Attention,
        cache: CacheUse<'_, T>,
        record: bool,
    ) -> Result<PassOutput<T>, ModelError> {
        pass::check_input(&self.config, input)?;
        Ok(pass::run(&self.config, &self.weights, input, attention, cache, record))
    }

    fn probs(&self, logits: Vec<T>) -> ProbRows<T> {
        let v = self.config.vocab_size;
        ProbRows {
            rows: self.config.response_len,
            vocab: v,
            data: pass::softmax_rows(&logits, v),
        }
    }

    /// Response logits under full bidirectional attention.
    pub fn logits(&self, input: &ModelInput<'_>) -> Result<Vec<T>, ModelError> {
        Ok(self.run(input, Attention::Full, CacheUse::None, false)?.logits)
    }

    /// Per-position distributions under full bidirectional attention.
    pub fn forward(&self, input: &ModelInput<'_>) -> Result<ProbRows<T>, ModelError> {
        let out = self.run(input, Attention::Full, CacheUse::None, false)?;
        Ok(self.probs(out.logits))
    }

    /// Full forward that also stores the prompt keys/values in `cache`.
    /// Arithmetic is identical to [`MaskPredictor::forward`].
    pub fn forward_filling(&self, input: &ModelInput<'_>, cache: &mut PromptCache<T>) -> Result<ProbRows<T>, ModelError> {
        let out = self.run(input, Attention::Full, CacheUse::Fill(cache), false)?;
        Ok(self.probs(out.logits))
    }

    /// Recomputes response rows only, attending to cached prompt keys/values.
    pub fn forward_cached(&self, input: &ModelInput<'_>, cache: &PromptCache<T>) -> Result<ProbRows<T>, ModelError> {
        if !cache.is_filled() {
            return Err(ModelError::DimensionMismatch("prompt cache is empty".into()));
        }
        let out = self.run(input, Attention::Full, CacheUse::Reuse(cache), false)?;
        Ok(self.probs(out.logits))
    }

    /// Distribution for response `position` given only the tokens before it.
    ///
    /// Positions `>= position` are replaced by the mask token and attention
    /// is causal, so the row is invariant to everything at or after
    /// `position`.
    pub fn forward_ar(&self, input: &ModelInput<'_>, position: usize) -> Result<Vec<T>, ModelError> {
        if position >= self.config.response_len {
            return Err(ModelError::DimensionMismatch(format!(
                "position {position} outside response of {}",
                self.config.response_len
            )));
        }
        let mut prefix = input.response.clone();
        for pos in position..prefix.len() {
            prefix.mask(pos);
        }
        let masked_input = ModelInput {
            response: &prefix,
            ..*input
        };
        let out = self.run(&masked_input, Attention::Causal, CacheUse::None, false)?;
        let v = self.config.vocab_size;
        Ok(pass::softmax_rows(&out.logits[position * v..(position + 1) * v], v))
    }

    /// Weighted masked cross-entropy and its exact gradient.
    ///
    /// `loss = −(1/t) · Σ_{i masked} log p(targets[i] | input)`, where the
    /// masked set is read from `input.response`.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput<'_>,
        targets: &TokenSequence,
        t: f64,
    ) -> Result<(f64, Weights<T>), ModelError> {
        let out = self.run(input, Attention::Full, CacheUse::None, true)?;
        let masked = input.response.masked_flags();
        let (loss, dlogits) = masked_cross_entropy(&out.logits, self.config.vocab_size, targets, &masked, t)?;
        let tape = out.tape.expect("tape recorded");
        let grad = backward::backward(&self.config, &self.weights, input, &tape, &dlogits);
        Ok((loss, grad))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, input: &ModelInput<'_>, targets: &TokenSequence, t: f64) -> Result<f64, ModelError> {
        let logits = self.logits(input)?;
        let masked = input.response.masked_flags();
        Ok(masked_cross_entropy(&logits, self.config.vocab_size, targets, &masked, t)?.0)
    }
}

/// `−(1/t) Σ_{masked i} log softmax(logits_i)[target_i]` and `∂/∂logits`.
///
/// Rows where `masked[i]` is false contribute nothing and get zero gradient.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &TokenSequence,
    masked: &[bool],
    t: f64,
) -> Result<(f64, Vec<T>), ModelError> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(ModelError::InvalidLoss(format!("noise level {t} outside (0, 1]")));
    }
    if masked.len() != targets.len() || logits.len() != vocab * targets.len() {
        return Err(ModelError::DimensionMismatch("loss operands".into()));
    }
    if !targets.is_fully_unmasked() {
        return Err(ModelError::InvalidLoss("targets contain mask tokens".into()));
    }
    if !masked.iter().any(|&m| m) {
        return Err(ModelError::NoMaskedPositions);
    }
    let inv_t = T::lit(1.0 / t);
    let mut loss = 0.0;
    let mut dlogits = vec![T::zero(); logits.len()];
    for (i, &is_masked) in masked.iter().enumerate() {
        if !is_masked {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let target = targets.ids()[i].index();
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        loss -= (row[target] - log_z).as_f64();
        let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (dv, &v) in drow.iter_mut().zip(row) {
            *dv = (v - log_z).exp() * inv_t;
        }
        drow[target] -= inv_t;
    }
    Ok((loss / t, dlogits))
}
