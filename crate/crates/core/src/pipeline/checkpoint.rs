use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::Adam;
use super::train::TrainOutput;
use super::TrainConfig;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};

/// Everything needed to resume or re-evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    /// Parameter name to `{shape, data}`.
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_output(out: &TrainOutput) -> Self {
        Checkpoint {
            config: out.model.config.clone(),
            step: out.step,
            params: out.model.params.clone(),
            optimizer: Some(out.optimizer.clone()),
        }
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(checkpoint)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.config.validate()?;
    for (name, t) in ckpt.params.iter() {
        if t.len() != t.shape().iter().product::<usize>() {
            return Err(Error::invalid(format!("parameter `{name}` has inconsistent shape")));
        }
    }
    Ok(ckpt)
}
