//! Residual convolutional embedder trained with an additive angular margin
//! (ArcFace) head.
//!
//! All training arithmetic is `f64`; embeddings are exported as `f32`.

mod arcface;
mod checkpoint;
mod net;
mod params;
mod train;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::spectrogram::MelSpectrogram;

pub use arcface::{arcface_backward, arcface_loss, ArcFaceOutput};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use net::{backward, forward, ForwardCache};
pub use params::{EmbedderParams, Tensor};
pub use train::{
    batch_gradients, fix_length, sgd_momentum_step, sgd_step, train, train_with, CropMode, EpochStats, LabeledMel,
    TrainHistory,
};

#[derive(Debug, Error, PartialEq)]
pub enum EmbedderError {
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub residual: bool,
}

/// How the last feature map is reduced before the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadPooling {
    /// Average over time and mel: one value per channel.
    #[default]
    Global,
    /// Average over time only: one value per channel and mel position.
    Time,
    /// No reduction: the whole map, flattened.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Patch length T in frames.
    pub input_frames: usize,
    pub n_mels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Embedding dimension D.
    pub embed_dim: usize,
    pub pooling: HeadPooling,
    pub rng_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_frames: 625,
            n_mels: 80,
            blocks: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| BlockSpec { channels, residual: true })
                .collect(),
            embed_dim: 128,
            pooling: HeadPooling::Global,
            rng_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedderError> {
        let bad = |m: String| Err(EmbedderError::InvalidConfig(m));
        if self.input_frames < 16 {
            return bad(format!("input_frames {} < 16", self.input_frames));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} < 2", self.embed_dim));
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.blocks.iter().any(|b| b.channels == 0) {
            return bad("block channels must be positive".into());
        }
        let shrink = 1usize << self.blocks.len().min(63);
        if self.input_frames < shrink || self.n_mels < shrink {
            return bad(format!(
                "{} pooling stages need input_frames and n_mels >= {shrink}",
                self.blocks.len()
            ));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.channels)
    }

    /// `(time, mel)` size of the last feature map.
    pub fn last_map(&self) -> (usize, usize) {
        let k = self.blocks.len().min(63);
        (self.input_frames >> k, self.n_mels >> k)
    }

    /// Length of the feature vector fed to the projection.
    pub fn feature_len(&self) -> usize {
        let (h, w) = self.last_map();
        self.last_channels()
            * match self.pooling {
                HeadPooling::Global => 1,
                HeadPooling::Time => w,
                HeadPooling::Flatten => h * w,
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub n_classes: usize,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
            n_classes: 0,
        }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<(), EmbedderError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(EmbedderError::InvalidConfig("arcface scale must be > 0".into()));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(EmbedderError::InvalidConfig("arcface margin must be in [0, pi)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Whether weight decay also applies to the class-weight matrix.
    pub decay_class_weights: bool,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-2,
            lr_decay: 0.5,
            lr_decay_every: 10,
            weight_decay: 1e-1,
            decay_class_weights: true,
            momentum: 0.0,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EmbedderError> {
        let bad = |m: &str| Err(EmbedderError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Unit-norm embedding of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub song_id: String,
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, EmbedderError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedderError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Trained network plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    params: EmbedderParams,
}

impl Embedder {
    pub fn new(config: EmbedderConfig, params: EmbedderParams) -> Result<Self, EmbedderError> {
        config.validate()?;
        params.check_architecture(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &EmbedderParams {
        &self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Embeds one fixed-size patch (`input_frames × n_mels`).
    pub fn embed_patch(&self, patch: ArrayView2<'_, f32>) -> Result<Vec<f64>, EmbedderError> {
        Ok(forward(&self.params, &self.config, patch)?.embedding().to_vec())
    }

    /// Center-crops or pads the spectrogram, then embeds it.
    pub fn embed(&self, mel: &MelSpectrogram, floor: f32) -> Result<Embedding, EmbedderError> {
        let patch = fix_length(mel.values().view(), self.config.input_frames, CropMode::Infer, floor, None);
        let v = self.embed_patch(patch.view())?;
        Ok(Embedding {
            vector: v.iter().map(|&x| x as f32).collect(),
            song_id: mel.source_id().to_string(),
        })
    }

    pub fn embed_batch(
        &self,
        mels: &[MelSpectrogram],
        floor: f32,
        exec: Execution,
    ) -> Vec<Result<Embedding, EmbedderError>> {
        par::map(exec, mels, |m| self.embed(m, floor))
    }
}

/// Embeds a `T × n_mels` patch with the given parameters.
pub fn forward_embed(
    params: &EmbedderParams,
    cfg: &EmbedderConfig,
    patch: &Array2<f32>,
) -> Result<Vec<f64>, EmbedderError> {
    Ok(forward(params, cfg, patch.view())?.embedding().to_vec())
}
