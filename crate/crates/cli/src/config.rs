use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tghoa::data::{DatasetConfig, SynthConfig};
use tghoa::params::ModelConfig;
use tghoa::trainer::TrainConfig;

use crate::CliError;

/// Everything a run needs besides paths and the seed. Every section is
/// optional in the file; missing sections take their defaults.
///
/// ```json
/// {
///   "dataset":  {"n_codes": 80, "indicators": ["heart_rate", "spo2"], "time_unit": "day",
///                "n_classes": 2, "n_u_max": 12},
///   "synth":    {"n_patients": 2000, "beta": 8.0, "...": "..."},
///   "model":    {"hidden": 128, "code_dim": 64, "lab_dim": 16},
///   "training": {"epochs": 30, "batch_size": 32,
///                "optimizer": {"learning_rate": 0.001, "rho": 0.9, "epsilon": 1e-8}},
///   "split_ratio": 0.8
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub split_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            split_ratio: 0.8,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
    }

    /// Model dimensions completed from the dataset section.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().for_dataset(&self.dataset)
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Override training.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override training.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override training.optimizer.learning_rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override model.hidden (LSTM and attention width d)
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Override model.code_dim (diagnosis embedding width)
    #[arg(long)]
    pub code_dim: Option<usize>,
    /// Override model.lab_dim (lab feature width)
    #[arg(long)]
    pub lab_dim: Option<usize>,
    /// Override split_ratio (training fraction)
    #[arg(long)]
    pub split_ratio: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.training.optimizer.learning_rate = v;
        }
        if let Some(v) = self.hidden {
            cfg.model.hidden = v;
        }
        if let Some(v) = self.code_dim {
            cfg.model.code_dim = v;
        }
        if let Some(v) = self.lab_dim {
            cfg.model.lab_dim = v;
        }
        if let Some(v) = self.split_ratio {
            cfg.split_ratio = v;
        }
    }
}
