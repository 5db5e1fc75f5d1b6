//! Two-stage training: masked-autoencoder pre-training of the image encoder,
//! then supervised fine-tuning against Gaussian density maps with a scaled,
//! pixel-dropped squared error.

mod augment;
mod loss;
mod mask;
mod trainer;

pub use augment::{augment_sample, AugmentToggles, TrainExample};
pub use loss::counting_loss;
pub use mask::random_mask;
pub use trainer::{finetune, pretrain, FinetuneOptions, PretrainOptions, StepRecord};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Fraction of patch tokens hidden from the encoder.
    pub mask_ratio: f64,
    pub mae_decoder_depth: usize,
    pub mae_decoder_dim: usize,
    pub mae_decoder_heads: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            mae_decoder_depth: 8,
            mae_decoder_dim: 512,
            mae_decoder_heads: 16,
            epochs: 300,
            learning_rate: 5e-6,
            batch_size: 16,
        }
    }
}

impl PretrainConfig {
    /// Shrink the decoder to match a desk-scale model width.
    pub fn toy() -> Self {
        Self {
            mae_decoder_depth: 2,
            mae_decoder_dim: 32,
            mae_decoder_heads: 4,
            epochs: 2,
            learning_rate: 1e-4,
            batch_size: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must lie strictly between 0 and 1",
                self.mask_ratio
            )));
        }
        if self.mae_decoder_dim % self.mae_decoder_heads != 0 {
            return Err(Error::Config(format!(
                "mae_decoder_dim {} not divisible by {} heads",
                self.mae_decoder_dim, self.mae_decoder_heads
            )));
        }
        if self.mae_decoder_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "mae_decoder_dim {} must be divisible by 4 for the position table",
                self.mae_decoder_dim
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Multiplier on the per-pixel squared error.
    pub loss_scale: f64,
    /// Probability of zeroing a pixel whose ground truth is exactly 0.
    pub nonobject_drop: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment: AugmentToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_scale: 60.0,
            nonobject_drop: 0.2,
            learning_rate: 1e-5,
            batch_size: 8,
            augment: AugmentToggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.nonobject_drop) {
            return Err(Error::Config(format!(
                "nonobject_drop {} must lie in [0, 1)",
                self.nonobject_drop
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.loss_scale <= 0.0 {
            return Err(Error::Config("loss_scale must be positive".into()));
        }
        Ok(())
    }
}
