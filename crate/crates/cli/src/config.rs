//! Run configuration file: one TOML document with `data`, `model`, `train`,
//! `ntk` and `ablation` sections. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scalemix::backbone::BackboneConfig;
use scalemix::data::{CsvSchema, SplitFractions};
use scalemix::forecaster::{ModelConfig, TrainConfig};
use scalemix::ntk::DEFAULT_BUDGET_BYTES;
use scalemix::Pooling;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ntk: NtkSection,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub date_column: String,
    /// Channel columns to read; all non-date columns when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<String>>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Free-text dataset description placed at the start of the prompt.
    pub description: String,
    /// Seed for the bundled synthetic series when a command runs without `--data`.
    pub synthetic_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            date_column: "date".into(),
            channels: None,
            train_fraction: f.train,
            val_fraction: f.val,
            test_fraction: f.test,
            description: "synthetic hourly sensor readings".into(),
            synthetic_seed: 0,
        }
    }
}

impl DataSection {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            date_column: self.date_column.clone(),
            channels: self.channels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub look_back: usize,
    pub horizon: usize,
    pub tau: usize,
    pub pdm_layers: usize,
    pub pdm_d_ff: usize,
    pub moving_avg: usize,
    pub pooling: Pooling,
    /// Seed of the random backbone used when no checkpoint is given.
    pub backbone_seed: u64,
    pub backbone: BackboneConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            look_back: m.look_back,
            horizon: m.horizon,
            tau: m.tau,
            pdm_layers: m.pdm_layers,
            pdm_d_ff: m.pdm_d_ff,
            moving_avg: m.moving_avg,
            pooling: m.pooling,
            backbone_seed: 0,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            look_back: self.look_back,
            horizon: self.horizon,
            tau: self.tau,
            pdm_layers: self.pdm_layers,
            pdm_d_ff: self.pdm_d_ff,
            moving_avg: self.moving_avg,
            pooling: self.pooling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkSection {
    pub taus: Vec<usize>,
    /// Kernel samples, pooled from the train and test splits.
    pub samples: usize,
    /// Share of the samples drawn from the train split.
    pub train_share: f64,
    pub budget_bytes: u64,
}

impl Default for NtkSection {
    fn default() -> Self {
        Self {
            taus: (1..=6).collect(),
            samples: 300,
            train_share: 0.5,
            budget_bytes: DEFAULT_BUDGET_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub poolings: Vec<Pooling>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            poolings: Pooling::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(toml_message(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.fractions().validate()?;
        self.model.model_config().validate()?;
        self.model.backbone.validate()?;
        self.train.validate()?;
        if self.ntk.taus.is_empty() {
            return Err(CliError::Config("ntk.taus must not be empty".into()));
        }
        if self.ntk.samples < 2 {
            return Err(CliError::Config("ntk.samples must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ntk.train_share) {
            return Err(CliError::Config(
                "ntk.train_share must lie in [0, 1]".into(),
            ));
        }
        if self.ablation.poolings.is_empty() {
            return Err(CliError::Config(
                "ablation.poolings must not be empty".into(),
            ));
        }
        Ok(())
    }
}

fn toml_message(e: &toml::de::Error) -> String {
    e.message().trim().replace('\n', " ")
}
