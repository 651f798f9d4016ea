//! Global JSON configuration shared by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignnet::AlignNetConfig;
use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PatchSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub loss_weights: LossWeights,
    pub patch: PatchSpec,
    pub curation: CurationConfig,
    pub alignnet: Option<AlignNetConfig>,
    pub train: Option<TrainConfig>,
}

impl GlobalConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.patch.validate()?;
        self.curation.validate()?;
        if let Some(a) = &self.alignnet {
            a.validate()?;
        }
        Ok(())
    }

    /// Training settings with the loss weights and network config of this
    /// file applied on top.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_default();
        t.weights = self.loss_weights;
        if let Some(a) = self.alignnet {
            t.net = a;
        }
        t
    }
}
