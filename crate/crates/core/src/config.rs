//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capture::SplitSpec;
use crate::codec::{CodecSpec, TrainOpts};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::fedsim::FedConfig;
use crate::lora::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub snapshots: PathBuf,
    pub codec: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { snapshots: "snapshots.cgfg".into(), codec: "codec.cgfg".into(), out_dir: "run".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed for data, partitions, sampling, local training and noise.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub fed: FedConfig,
    pub codec: CodecSpec,
    pub train: TrainOpts,
    pub split: SplitSpec,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            fed: FedConfig::default(),
            codec: CodecSpec { rows: 0, cols: 0, ..CodecSpec::resnet2d_desk() },
            train: TrainOpts::default(),
            split: SplitSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Codec spec with the canvas shape filled in from the model.
    pub fn codec_spec(&self) -> CodecSpec {
        self.codec.resolved(self.model.canvas_shape())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.fed.validate()?;
        if self.task.n_classes != self.model.n_classes {
            return Err(Error::Config(format!(
                "task.n_classes = {} but model.n_classes = {}",
                self.task.n_classes, self.model.n_classes
            )));
        }
        let spec = self.codec_spec();
        spec.validate().map_err(|e| Error::Config(format!("codec: {e}")))?;
        if [spec.rows, spec.cols] != self.model.canvas_shape() {
            return Err(Error::Config(format!(
                "codec canvas {}x{} does not match the model canvas {:?}",
                spec.rows,
                spec.cols,
                self.model.canvas_shape()
            )));
        }
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train: batch and lr must be positive".into()));
        }
        Ok(())
    }
}
