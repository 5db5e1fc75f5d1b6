//! Run-level configuration: one JSON document nesting every module's
//! settings, so any command is reproducible from the document plus a seed.
//! Unknown keys anywhere in the document are fatal — a typo must not
//! silently fall back to a default.

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::mosaic::MosaicConfig;
use crate::training::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub mosaic: MosaicConfig,
    pub inference: InferenceConfig,
    /// Master seed; every random choice derives from it via named
    /// sub-streams, so enabling one feature never perturbs another.
    pub seed: u64,
    /// Gaussian kernel width for ground-truth density maps.
    pub sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            mosaic: MosaicConfig::default(),
            inference: InferenceConfig::default(),
            seed: 0,
            sigma: 4.0,
        }
    }
}

impl RunConfig {
    /// The toy profile: small model, small MAE decoder, same defaults
    /// elsewhere. Window and resize height follow the model input size.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let inference = InferenceConfig {
            window: model.image_size,
            stride: model.image_size / 2,
            resize_height: model.image_size,
            ..InferenceConfig::default()
        };
        Self {
            model,
            pretrain: PretrainConfig::toy(),
            inference,
            sigma: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.mosaic.validate()?;
        self.inference.validate()?;
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully-resolved document (defaults filled in) so the run can
    /// be reproduced from the output directory alone.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
