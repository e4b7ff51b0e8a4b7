//! Flat `key = value` run configuration covering the template, model size,
//! training and decoding knobs. Unknown keys are rejected; `key=value`
//! overrides apply on top of a file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, TemplateSpec};
use crate::decoder::{CachePolicy, DecodeConfig};
use crate::model::ModelConfig;
use crate::training::{Optimizer, Schedule, TrainConfig};
use crate::world::{DatasetKind, CONTEXT_LEN, RASTER_CHANNELS, RASTER_SIZE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {reason}")]
    Parse { origin: String, reason: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error(transparent)]
    Template(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Off,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub kind: DatasetKind,

    pub waypoints: usize,
    pub int_digits: usize,
    pub frac_digits: usize,
    pub fixed_pattern: bool,

    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_width: usize,
    pub patch: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t_min: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,

    pub steps: usize,
    pub tau: f64,
    pub cache: CacheMode,
    pub cache_refresh: usize,

    /// Training data file; generated from `train_count` seeds when empty.
    pub train_data: String,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            kind: DatasetKind::Driving,
            waypoints: 6,
            int_digits: 2,
            frac_digits: 1,
            fixed_pattern: true,
            d_model: 64,
            heads: 4,
            blocks: 4,
            ff_width: 128,
            patch: 4,
            epochs: 8,
            batch_size: t.batch_size,
            learning_rate: 0.2,
            t_min: t.t_min,
            clip_norm: t.clip_norm,
            optimizer: t.optimizer,
            schedule: Schedule::Linear,
            steps: 16,
            tau: 0.5,
            cache: CacheMode::Off,
            cache_refresh: 4,
            train_data: String::new(),
            train_count: 5000,
            val_count: 200,
        }
    }
}

impl RunConfig {
    /// Defaults adjusted for `kind`: the parking task answers with one waypoint.
    pub fn for_kind(kind: DatasetKind) -> Self {
        let mut c = Self {
            kind,
            ..Self::default()
        };
        if kind == DatasetKind::Parking {
            c.waypoints = 1;
        }
        c
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(assignment.to_string()));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        table.insert(key.to_string(), value);
        *self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: format!("override {assignment:?}"),
            reason: e.message().to_string(),
        })?;
        Ok(())
    }

    /// The fully resolved configuration as TOML, for provenance.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn template(&self) -> Result<TemplateSpec, ConfigError> {
        Ok(TemplateSpec::new(self.waypoints, self.int_digits, self.frac_digits)?.with_fixed_pattern(self.fixed_pattern))
    }

    pub fn model(&self, vocab_size: usize) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            blocks: self.blocks,
            ff_width: self.ff_width,
            channels: RASTER_CHANNELS,
            raster_height: RASTER_SIZE,
            raster_width: RASTER_SIZE,
            patch: self.patch,
            context_len: CONTEXT_LEN,
            response_len: self.template()?.length(),
        };
        cfg.validate().map_err(|e| ConfigError::Parse {
            origin: "model".into(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            t_min: self.t_min,
            clip_norm: self.clip_norm,
            optimizer: self.optimizer,
            schedule: self.schedule,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig::new(self.steps, self.tau).with_cache(match self.cache {
            CacheMode::Off => CachePolicy::Off,
            CacheMode::Prompt => CachePolicy::Prompt {
                refresh: self.cache_refresh,
            },
        })
    }
}
