use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape of a [`super::MaskPredictor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_width: usize,
    pub channels: usize,
    pub raster_height: usize,
    pub raster_width: usize,
    pub patch: usize,
    pub context_len: usize,
    pub response_len: usize,
}

impl ModelConfig {
    /// d_model 64, 4 heads, 4 blocks, 2×16×16 raster in 4×4 patches.
    pub fn toy(vocab_size: usize, response_len: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            blocks: 4,
            ff_width: 128,
            channels: 2,
            raster_height: 16,
            raster_width: 16,
            patch: 4,
            context_len: 4,
            response_len,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny(vocab_size: usize, response_len: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            heads: 2,
            blocks: 1,
            ff_width: 16,
            channels: 2,
            raster_height: 4,
            raster_width: 4,
            patch: 2,
            context_len: 2,
            response_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidConfig(what.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 || self.ff_width == 0 {
            return bad("vocab_size, d_model, heads and ff_width must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.patch == 0
            || self.raster_height % self.patch != 0
            || self.raster_width % self.patch != 0
        {
            return bad("raster dimensions must be multiples of the patch size");
        }
        if self.channels == 0 || self.raster_height == 0 || self.response_len == 0 {
            return bad("raster and response must be non-empty");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn patch_count(&self) -> usize {
        (self.raster_height / self.patch) * (self.raster_width / self.patch)
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Scene patches plus context tokens.
    pub fn prompt_len(&self) -> usize {
        self.patch_count() + self.context_len
    }

    pub fn sequence_len(&self) -> usize {
        self.prompt_len() + self.response_len
    }
}
