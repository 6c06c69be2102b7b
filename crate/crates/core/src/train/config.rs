use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::ModelConfig;
use crate::train::optim::OptimConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Everything that determines a training run. Serialized as JSON; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Training images are indices `0..num_images` of this spec.
    pub data: SyntheticSpec,
    /// Held-out images taken from the indices after the training images.
    pub holdout_images: usize,
    /// `None` trains on the full images without augmentation. With a crop
    /// smaller than the images, evaluation uses the central crop.
    pub augment: Option<AugmentConfig>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelConfig {
                reduced_channels: 32,
                init_std: 0.1,
                ..ModelConfig::default()
            },
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            data: SyntheticSpec::default(),
            holdout_images: 4,
            augment: None,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        let m = &self.model;
        if m.in_channels != 1 {
            return Err(Error::ConfigMismatch(format!(
                "synthetic images have 1 channel, model expects {}",
                m.in_channels
            )));
        }
        if m.num_classes != self.data.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "model predicts {} classes, data has {}",
                m.num_classes, self.data.num_classes
            )));
        }
        let side = match &self.augment {
            Some(a) => {
                a.validate()?;
                if a.crop_size > self.data.image_size {
                    return Err(Error::CropTooLarge {
                        crop: a.crop_size,
                        height: self.data.image_size,
                        width: self.data.image_size,
                    });
                }
                a.crop_size
            }
            None => self.data.image_size,
        };
        if m.image_height != side || m.image_width != side {
            return Err(Error::ConfigMismatch(format!(
                "model input {}x{} but training images are {side}x{side}",
                m.image_height, m.image_width
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
