//! Model checkpoints as versioned JSON.
//!
//! ```text
//! {
//!   "format": "sinewich-checkpoint",
//!   "version": 1,
//!   "config_hash": "<sha256 hex of the canonical model config JSON>",
//!   "config": { ...model config... },
//!   "seed": 7,
//!   "tensors": [ { "name": "enc.s0.ta0.A", "shape": [4, 2], "data": [...] }, ... ],
//!   "buffers": [ { "name": "dec.t0.running_mean", ... }, ... ]
//! }
//! ```
//!
//! The frozen backbone is not stored; it is redrawn from `seed`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::network::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "sinewich-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn new(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// SHA-256 of the config's compact JSON serialization, hex encoded.
pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn capture(model: &Model, seed: u64) -> Result<Self> {
        let p = model.params();
        let tensors = p
            .info()
            .iter()
            .zip(p.tensors())
            .map(|(i, t)| NamedTensor::new(i.name.clone(), t))
            .collect();
        let mut buffers = Vec::new();
        for (t, rs) in model.running_stats().iter().enumerate() {
            buffers.push(NamedTensor::new(format!("dec.t{t}.running_mean"), &rs.mean));
            buffers.push(NamedTensor::new(format!("dec.t{t}.running_var"), &rs.var));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(model.config())?,
            config: model.config().clone(),
            seed,
            tensors,
            buffers,
        })
    }

    /// Rebuilds the model, checking the format, hash, names and shapes.
    pub fn restore(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let hash = config_hash(&self.config)?;
        if hash != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut model = Model::new(self.config.clone(), self.seed)?;
        let expected: Vec<String> = model.params().info().iter().map(|i| i.name.clone()).collect();
        let names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != expected {
            return Err(Error::Checkpoint("tensor names do not match the model layout".into()));
        }
        let tensors = self
            .tensors
            .iter()
            .map(NamedTensor::tensor)
            .collect::<Result<Vec<_>>>()?;
        model
            .params_mut()
            .assign(tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tasks = model.config().num_tasks;
        if self.buffers.len() != 2 * tasks {
            return Err(Error::Checkpoint(format!(
                "expected {} buffers, found {}",
                2 * tasks,
                self.buffers.len()
            )));
        }
        for (t, pair) in self.buffers.chunks(2).enumerate() {
            let rs = &mut model.running_stats_mut()[t];
            let (mean, var) = (pair[0].tensor()?, pair[1].tensor()?);
            if mean.shape() != rs.mean.shape() || var.shape() != rs.var.shape() {
                return Err(Error::Checkpoint(format!(
                    "running stats of task {t} have the wrong shape"
                )));
            }
            rs.mean = mean;
            rs.var = var;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
