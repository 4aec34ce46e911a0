use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ForecastModel, ModelConfig, ModelDims};
use crate::graph::ModelError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint holds parameter {0} the model does not have")]
    Unexpected(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Self-describing model snapshot.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &ForecastModel) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            dims: model.dims(),
            params: model
                .params()
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and checks every stored array against it.
    pub fn into_model(self) -> Result<ForecastModel, CheckpointError> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version,
            });
        }
        let mut model = ForecastModel::new(&self.config, self.dims, 0)?;
        let store = model.params_mut();
        if let Some(extra) = self.params.iter().find(|p| store.id(&p.name).is_none()) {
            return Err(CheckpointError::Unexpected(extra.name.clone()));
        }
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let stored = self
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let id = store.id(&name).expect("name taken from the store");
            let value = store.value_mut(id);
            if value.shape() != stored.shape.as_slice() || stored.data.len() != value.len() {
                return Err(CheckpointError::Shape {
                    name,
                    expected: value.shape().to_vec(),
                    found: stored.shape.clone(),
                });
            }
            value.data_mut().copy_from_slice(&stored.data);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &ForecastModel, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ForecastModel, CheckpointError> {
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    ck.into_model()
}
