use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result, TimePerceiver};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "timeperceiver-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// AdamW moments and progress counters, stored alongside the weights so
/// training can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSnapshot {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub best_val_mse: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_model(model: &TimePerceiver, optimizer: Option<OptimizerSnapshot>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model
                .store
                .params()
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            optimizer,
        }
    }

    /// Rebuilds the model; every stored array must match a parameter of the
    /// architecture implied by the config in name and shape.
    pub fn to_model(&self) -> Result<TimePerceiver> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = TimePerceiver::new(self.config.clone())?;
        if self.params.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} arrays, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for arr in &self.params {
            let id = model
                .store
                .find(&arr.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {}", arr.name)))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != arr.shape.as_slice() || arr.data.len() != slot.numel() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    arr.name,
                    arr.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(arr.shape.clone(), arr.data.clone())
                .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", arr.name)))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

impl TimePerceiver {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self, None).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.to_model()
    }
}
