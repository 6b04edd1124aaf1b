//! Run configuration, stored as TOML.
//!
//! Every section and key is optional and falls back to the desk-scale
//! defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::diff::AdamWConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::render::RenderConfig;
use crate::training::{SampleSpec, StageSchedule, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Two interleaved context subsets per step plus the agreement loss.
    pub consistency: bool,
    /// Held-out PSNR is measured every this many steps (0 disables).
    pub eval_every: u64,
    /// A checkpoint is written every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
    pub schedule: StageSchedule,
    pub sample: SampleSpec,
    pub synthetic: SyntheticConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            consistency: true,
            eval_every: 250,
            checkpoint_every: 0,
            optimizer: AdamWConfig::default(),
            schedule: StageSchedule::toy(),
            sample: SampleSpec::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Where checkpoints and `metrics.jsonl` go.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Posed-image dataset directory; the synthetic scene is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Square side that dataset images are cropped and resized to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub render: RenderConfig,
    pub losses: LossConfig,
    pub training: TrainingConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder, decoder: self.decoder }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.losses.validate()?;
        let t = &self.training;
        t.schedule.validate()?;
        t.sample.validate()?;
        t.synthetic.validate()?;
        if !(t.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if t.consistency && t.sample.context_views < 3 {
            return Err(Error::Config("consistency needs at least 3 context views".into()));
        }
        if self.render.tile_size == 0 {
            return Err(Error::Config("render.tile_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
