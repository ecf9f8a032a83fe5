//! JSON checkpoints with base64 little-endian `f32` tensor blobs.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Model, ModelConfig, ModelError};
use super::optim::{Adam, AdamConfig};

pub const FORMAT: &str = "pathstar-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub step: u64,
    pub adam_t: u64,
    /// Free-form trainer state (seed, next batch index, samples seen, ...).
    pub trainer: serde_json::Value,
    pub params: String,
    pub adam_m: String,
    pub adam_v: String,
}

pub fn encode_f32(xs: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32(s: &str) -> Result<Vec<f32>, CheckpointError> {
    let bytes = B64.decode(s).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Format(format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, opt: &Adam<f32>, step: u64, trainer: serde_json::Value) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            adam: opt.config,
            step,
            adam_t: opt.t,
            trainer,
            params: encode_f32(&model.params),
            adam_m: encode_f32(&opt.m),
            adam_v: encode_f32(&opt.v),
        }
    }

    pub fn restore(&self) -> Result<(Model<f32>, Adam<f32>), CheckpointError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let model = Model::from_params(self.model.clone(), decode_f32(&self.params)?)?;
        let m = decode_f32(&self.adam_m)?;
        let v = decode_f32(&self.adam_v)?;
        if m.len() != model.num_params() || v.len() != model.num_params() {
            return Err(CheckpointError::Format("optimizer state size mismatch".into()));
        }
        let opt = Adam { config: self.adam, m, v, t: self.adam_t };
        Ok((model, opt))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let json = serde_json::to_vec(self).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}
