//! Run configuration files.

use std::path::Path;

use geo_repnet_core::dgpg::DgpgConfig;
use geo_repnet_core::gema::GemaConfig;
use geo_repnet_core::train::TrainConfig;
use geo_repnet_core::GeoRepNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Multiplier on the reference train counts.
    pub train_scale: f64,
    /// Multiplier on the reference validation counts.
    pub val_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scale: 0.1,
            val_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: GeoRepNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfigFile {
    /// Smallest model, used by the gradient check.
    pub fn micro() -> Self {
        RunConfigFile {
            model: GeoRepNetConfig::micro(),
            ..Default::default()
        }
    }

    /// Small 32×32 model with strong depth priors; separates the depth-only classes
    /// in a few minutes of CPU training.
    pub fn ablation() -> Self {
        RunConfigFile {
            model: GeoRepNetConfig {
                input_height: 32,
                input_width: 32,
                stage_widths: vec![16, 32, 64, 128],
                stage_depths: vec![1, 1, 1, 1],
                dgpg: DgpgConfig {
                    num_heads: 2,
                    freq_count: 4,
                    lambda0: 1.0,
                    w1_raw: -3.0,
                    w2_raw: 20.0,
                    ..DgpgConfig::default()
                },
                gema: GemaConfig {
                    num_heads: 2,
                    head_dim: 8,
                    ema_factor: 4,
                    ..GemaConfig::default()
                },
                ..GeoRepNetConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                base_lr: 1e-3,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    /// Same network as [`RunConfigFile::ablation`] with every geometry component off.
    pub fn backbone_only(mut self) -> Self {
        self.model.enable_dgpg = false;
        self.model.gema.enable_gsa = false;
        self.model.gema.enable_ema = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for (name, v) in [("train_scale", self.data.train_scale), ("val_scale", self.data.val_scale)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Data(format!("data.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = json::from_str(text, "run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_canonical(&self) -> Result<String> {
        json::to_canonical(self)
    }
}
