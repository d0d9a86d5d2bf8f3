//! Run configuration: one TOML document fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DataConfig, EventConfig};
use crate::encoders::{EncoderConfig, PretrainConfig, TaskKind};
use crate::error::{Error, Result};
use crate::evalharness::EvalConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of the stride-2 encoder stages.
    pub widths: Vec<usize>,
    pub task: TaskKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![16, 32, 64],
            task: TaskKind::Centroid { n_shapes: 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub optim: PretrainConfig,
    /// Every n-th high-rate frame of each training scene is used.
    pub frame_stride: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            optim: PretrainConfig::default(),
            frame_stride: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub events: EventConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg = Self::from_toml(&text)?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn image_encoder(&self) -> EncoderConfig {
        let s = &self.data.sampler;
        EncoderConfig::new(1, self.model.widths.clone(), s.height, s.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_scenes == 0 {
            return Err(Error::Config("data.n_scenes must be positive".into()));
        }
        if self.events.bins == 0 || !(self.events.threshold > 0.0) || !(self.events.eps > 0.0) {
            return Err(Error::Config("events: bins, threshold and eps must be positive".into()));
        }
        if let TaskKind::Centroid { n_shapes } = self.model.task {
            if n_shapes != self.data.sampler.n_shapes {
                return Err(Error::Config(format!(
                    "centroid head predicts {n_shapes} shapes but scenes have {}",
                    self.data.sampler.n_shapes
                )));
            }
        }
        if self.pretrain.frame_stride == 0 {
            return Err(Error::Config("pretrain.frame_stride must be positive".into()));
        }
        let enc = self.image_encoder();
        enc.validate()?;
        if self.train.eformer.dim != enc.feature_dim {
            return Err(Error::Config(format!(
                "train.eformer.dim ({}) must equal the last encoder width ({})",
                self.train.eformer.dim, enc.feature_dim
            )));
        }
        self.train.validate()?;
        self.eval.validate()
    }
}
