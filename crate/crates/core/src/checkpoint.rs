//! JSON checkpoints: model config, optional run config and every parameter
//! by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batchformer::{BatchFormerModel, ModelConfig};
use crate::config::LabConfig;
use crate::error::{LabError, Result};
use crate::nn::ParamGroup;
use crate::tensor::Tensor;

pub const FORMAT: &str = "bflab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub config: Option<LabConfig>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &BatchFormerModel, config: Option<&LabConfig>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            config: config.cloned(),
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model. Every parameter must be present with its shape.
    pub fn into_model(self) -> Result<BatchFormerModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(LabError::Format(format!(
                "not a {FORMAT} v{VERSION} file ({} v{})",
                self.format, self.version
            )));
        }
        let mut model = BatchFormerModel::init(self.model, 0)?;
        if self.params.len() != model.store.len() {
            return Err(LabError::Format(format!(
                "checkpoint has {} parameters, model needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for rec in self.params {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| LabError::Format(format!("unknown parameter {}", rec.name)))?;
            if model.store.get(id).group != rec.group {
                return Err(LabError::Format(format!("group mismatch for {}", rec.name)));
            }
            let t = Tensor::new(rec.shape, rec.data)?;
            let slot = model.store.value_mut(id);
            if slot.shape() != t.shape() {
                return Err(LabError::dim("checkpoint", slot.shape(), t.shape()));
            }
            if !t.is_finite() {
                return Err(LabError::NonFinite { op: "checkpoint" });
            }
            *slot = t;
        }
        Ok(model)
    }
}

pub fn save(model: &BatchFormerModel, config: Option<&LabConfig>, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from_model(model, config))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(BatchFormerModel, Option<LabConfig>)> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let config = ck.config.clone();
    Ok((ck.into_model()?, config))
}
