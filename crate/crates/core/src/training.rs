//! Forward masking and the supervised fine-tuning loop.
//!
//! Each sample draws its own noise level `t ~ U(0, 1)`, clamped below at
//! `t_min`, masks every free response position independently with
//! probability `t`, and contributes `−(1/t) Σ_masked log p(target)` to the
//! batch mean.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{FixedPatternTemplate, TokenId, TokenSequence};
use crate::model::checkpoint::Checkpoint;
use crate::model::{MaskPredictor, ModelError, ModelInput, SceneRaster, Weights};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Sgd,
    /// Adam with the usual `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Decays linearly from `learning_rate` towards zero at the last step.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Lower clamp on the sampled noise level.
    pub t_min: f64,
    /// Global gradient-norm clip applied before every update.
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 0,
            t_min: 0.01,
            clip_norm: 1.0,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.t_min > 0.0 && self.t_min <= 0.1) {
            return bad("t_min must lie in (0, 0.1]");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// One supervised pair: prompt plus the fully unmasked target response.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub scene: SceneRaster,
    pub context: Vec<TokenId>,
    pub target: TokenSequence,
}

/// Masks each free position of `targets` independently with probability `t`.
/// Frozen positions are never touched.
pub fn apply_forward_masking<R: Rng + ?Sized>(
    targets: &TokenSequence,
    tpl: &FixedPatternTemplate,
    t: f64,
    rng: &mut R,
) -> TokenSequence {
    let mut out = targets.clone();
    let p = t.clamp(0.0, 1.0);
    for &pos in tpl.free_positions() {
        if rng.random_bool(p) {
            out.mask(pos);
        }
    }
    out
}

/// `t ~ U(0, 1)` clamped to `[t_min, 1]`.
pub fn sample_noise_level<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f64 {
    rng.random::<f64>().clamp(t_min, 1.0)
}

/// Draws `t` and a corruption from `rng`, redrawing both until at least one
/// position is masked.
pub fn corrupt<R: Rng + ?Sized>(
    targets: &TokenSequence,
    tpl: &FixedPatternTemplate,
    t_min: f64,
    rng: &mut R,
) -> (f64, TokenSequence) {
    assert!(!tpl.free_positions().is_empty(), "template has no free positions");
    loop {
        let t = sample_noise_level(rng, t_min);
        let seq = apply_forward_masking(targets, tpl, t, rng);
        if seq.masked_count() > 0 {
            return (t, seq);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Batch mean of the per-sample losses.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Owns the model and optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: MaskPredictor<f32>,
    template: FixedPatternTemplate,
    config: TrainConfig,
    moments: Option<(Weights<f32>, Weights<f32>)>,
    steps: u64,
    lr_scale: f64,
}

impl Trainer {
    pub fn new(model: MaskPredictor<f32>, template: FixedPatternTemplate, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if template.len() != model.config().response_len {
            return Err(TrainError::Config(format!(
                "template length {} does not match model response length {}",
                template.len(),
                model.config().response_len
            )));
        }
        Ok(Self {
            model,
            template,
            config,
            moments: None,
            steps: 0,
            lr_scale: 1.0,
        })
    }

    pub fn model(&self) -> &MaskPredictor<f32> {
        &self.model
    }

    pub fn into_model(self) -> MaskPredictor<f32> {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer update. Sample `i` is corrupted with an rng seeded from
    /// `noise_seeds[i]`, so identical samples with identical seeds produce
    /// identical losses.
    pub fn train_step(&mut self, batch: &[&TrainExample], noise_seeds: &[u64]) -> Result<StepStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        assert_eq!(batch.len(), noise_seeds.len(), "one noise seed per sample");
        let mut total = Weights::<f32>::zeros(self.model.config());
        let mut per_sample = Vec::with_capacity(batch.len());
        for (ex, &seed) in batch.iter().zip(noise_seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, corrupted) = corrupt(&ex.target, &self.template, self.config.t_min, &mut rng);
            let input = ModelInput {
                scene: &ex.scene,
                context: &ex.context,
                response: &corrupted,
            };
            let (loss, grad) = self.model.loss_and_grad(&input, &ex.target, t)?;
            total.add_scaled(&grad, 1.0);
            per_sample.push(loss);
        }
        let n = batch.len() as f64;
        total.scale((1.0 / n) as f32);
        let grad_norm = total.squared_norm().sqrt();
        if !grad_norm.is_finite() {
            return Err(ModelError::InvalidLoss(format!("non-finite gradient at step {}", self.steps)).into());
        }
        if grad_norm > self.config.clip_norm {
            total.scale((self.config.clip_norm / grad_norm) as f32);
        }
        self.apply(&total);
        self.steps += 1;
        Ok(StepStats {
            loss: per_sample.iter().sum::<f64>() / n,
            per_sample,
            grad_norm,
        })
    }

    /// Multiplies the configured learning rate for subsequent steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    fn apply(&mut self, grad: &Weights<f32>) {
        let lr = (self.config.learning_rate * self.lr_scale) as f32;
        match self.config.optimizer {
            Optimizer::Sgd => self.model.weights_mut().add_scaled(grad, -lr),
            Optimizer::Adam => {
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let cfg = *self.model.config();
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (Weights::zeros(&cfg), Weights::zeros(&cfg)));
                let step = (self.steps + 1) as i32;
                let c1 = 1.0 - b1.powi(step);
                let c2 = 1.0 - b2.powi(step);
                let params = self.model.weights_mut().tensors_mut();
                let tensors = params
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for (((p, g), m), v) in tensors {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                        v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub steps: u64,
    pub checkpoint: Option<PathBuf>,
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs<'a> {
    /// Per-epoch `epoch,mean_loss,seconds` rows.
    pub log: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    /// Resolved run configuration, echoed into the log and the checkpoint.
    pub provenance: &'a str,
}

/// Runs the epoch loop. Deterministic given `config.seed`.
pub fn train(
    model: MaskPredictor<f32>,
    dataset: &[TrainExample],
    template: &FixedPatternTemplate,
    config: &TrainConfig,
    outputs: &TrainOutputs<'_>,
) -> Result<(MaskPredictor<f32>, TrainReport), TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let mut trainer = Trainer::new(model, template.clone(), *config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = match outputs.log {
        Some(path) => {
            let mut text = String::new();
            for line in outputs.provenance.lines() {
                text.push_str("# ");
                text.push_str(line);
                text.push('\n');
            }
            text.push_str("epoch,mean_loss,seconds\n");
            write_file(path, text.as_bytes())?;
            Some((path, fs::OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?))
        }
        None => None,
    };

    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        epoch_seconds: Vec::new(),
        steps: 0,
        checkpoint: None,
    };
    let total_steps = (config.epochs * dataset.len().div_ceil(config.batch_size)) as f64;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            if config.schedule == Schedule::Linear {
                trainer.set_lr_scale(1.0 - trainer.steps() as f64 / total_steps);
            }
            sum += trainer.train_step(&batch, &seeds)?.loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        let secs = start.elapsed().as_secs_f64();
        if !mean.is_finite() {
            return Err(ModelError::InvalidLoss(format!("non-finite loss in epoch {epoch}")).into());
        }
        report.epoch_losses.push(mean);
        report.epoch_seconds.push(secs);
        if let Some((path, file)) = log.as_mut() {
            writeln!(file, "{epoch},{mean:.6},{secs:.3}").map_err(|e| io_err(path, e))?;
        }
    }
    report.steps = trainer.steps();
    let model = trainer.into_model();
    if let Some(path) = outputs.checkpoint {
        let ck = Checkpoint {
            model: model.clone(),
            template: template.spec(),
            provenance: outputs.provenance.to_string(),
        };
        ck.save(path)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    Ok((model, report))
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}
