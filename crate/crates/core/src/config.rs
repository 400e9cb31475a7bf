//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::KalmanConfig;
use crate::datagen::ScenarioConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::ogm::GridSpec;
use crate::seq2seq::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub series: PathBuf,
    pub predictions: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data/dataset.jsonl".into(),
            checkpoint: "runs/model.ckpt".into(),
            metrics: "runs/metrics.csv".into(),
            series: "runs/series.csv".into(),
            predictions: "runs/predictions.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the train and scenario seeds when set.
    pub seed: Option<u64>,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
    pub eval: EvalConfig,
    pub kalman: KalmanConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Pushes the top-level seed into the sections that consume one.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.scenario.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.scenario.validate()?;
        self.kalman.validate()?;
        if (self.grid.q_w, self.grid.q_l) != (self.model.q_w, self.model.q_l) {
            return Err(Error::Config(format!(
                "grid is {}x{} but the model expects {}x{} (embedding columns {}x{})",
                self.grid.q_w,
                self.grid.q_l,
                self.model.q_w,
                self.model.q_l,
                self.model.embed_cols_w(),
                self.model.embed_cols_l()
            )));
        }
        self.eval
            .validate(self.model.beam_width, self.model.horizon)
    }
}
