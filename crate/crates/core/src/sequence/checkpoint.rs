use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::attention::AblationConfig;
use crate::autodiff::TensorRecord;
use crate::data::DatasetConfig;
use crate::features::Normalizer;
use crate::params::{ModelConfig, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tghoa-checkpoint-1";

/// How the training data was split, so evaluation can recover the held-out
/// side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// A trained model with everything needed to rerun it on raw records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub normalizer: Normalizer,
    pub split: Option<SplitSpec>,
    pub seed: u64,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        dataset: DatasetConfig,
        normalizer: Normalizer,
        split: Option<SplitSpec>,
        seed: u64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            dataset,
            model: model.config.clone(),
            ablation: model.ablation,
            normalizer,
            split,
            seed,
            params: model.params.to_named(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Ok(Model {
            config: self.model.clone(),
            ablation: self.ablation,
            params: ModelParams::from_named(&self.model, &self.params)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        if ck.normalizer.mean.len() != ck.model.n_indicators || ck.normalizer.std.len() != ck.model.n_indicators {
            return Err(Error::Checkpoint("normalizer does not match the indicator count".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
