//! Checkpoint directory: `checkpoint.json` index plus one little-endian
//! `f32` blob per named parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};
use umm_core::{Tensor, UmmModel};

use crate::config::{RunConfig, CONFIG_VERSION};
use crate::error::{Result, UmmError};
use crate::fsutil;

pub const INDEX: &str = "checkpoint.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub config_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<ParamIndexEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub model: UmmModel,
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

pub fn save_checkpoint(dir: &Path, config: &RunConfig, epoch: usize, model: &UmmModel) -> Result<()> {
    let mut params = Vec::with_capacity(model.store.len());
    for e in model.store.entries() {
        let file = blob_name(&e.name);
        let bytes = fsutil::f32_le_bytes(e.tensor.data().iter().map(|&x| x as f32));
        fsutil::write_atomic(&dir.join(&file), &bytes)?;
        params.push(ParamIndexEntry { name: e.name.clone(), shape: e.tensor.shape().to_vec(), file });
    }
    let index = CheckpointIndex {
        format_version: FORMAT_VERSION,
        config_version: config.config_version,
        config: config.clone(),
        seed: config.seed,
        epoch,
        params,
    };
    fsutil::write_atomic(&dir.join(INDEX), &fsutil::to_json(&index))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(INDEX);
    let text = fsutil::read_string(&path)?;
    let raw: serde_json::Value = fsutil::parse_json(&path, &text)?;
    for (key, what, expected) in [("format_version", "checkpoint format", FORMAT_VERSION), ("config_version", "config", CONFIG_VERSION)] {
        let found = raw.get(key).and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != expected {
            return Err(UmmError::VersionMismatch { what, expected, found });
        }
    }
    let index: CheckpointIndex = fsutil::parse_json(&path, &text)?;
    let mut tensors = Vec::with_capacity(index.params.len());
    for p in &index.params {
        let blob = dir.join(&p.file);
        let n = p.shape.iter().product();
        let data = fsutil::f32_from_le(&blob, &fsutil::read(&blob)?, n)?;
        tensors.push((p.name.as_str(), Tensor::from_vec(&p.shape, data.into_iter().map(f64::from).collect())));
    }
    let model = UmmModel::from_params(&index.config.model, tensors)?;
    Ok(Checkpoint { config: index.config, epoch: index.epoch, model })
}
