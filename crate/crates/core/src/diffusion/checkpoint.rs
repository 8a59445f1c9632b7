//! Versioned safetensors checkpoints.
//!
//! Tensors are stored under `model.<param>` and `optim.<m|v>.<param>`. The
//! header metadata carries the format version, the model configuration, the
//! embedding-table fingerprint, the training step and the optimizer step.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::schedule::ScheduleConfig;
use super::unet::UNetConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the model around the stored weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub scale: usize,
    pub table_fingerprint: String,
    pub table_backend: String,
    pub step: u64,
    pub optimizer_steps: u64,
    /// The full run configuration, for provenance.
    pub run_config: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

const HEADER_KEY: &str = "header";

pub fn save(path: &Path, header: &CheckpointHeader, params: &BTreeMap<String, Tensor>, optimizer: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut all: HashMap<String, Tensor> = HashMap::new();
    for (k, v) in params {
        all.insert(format!("model.{k}"), v.clone());
    }
    for (k, v) in optimizer {
        all.insert(format!("optim.{k}"), v.clone());
    }
    let mut meta = HashMap::new();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(header)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("safetensors.tmp");
    let data: Vec<(String, Tensor)> = {
        let mut v: Vec<_> = all.into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };
    safetensors::serialize_to_file(data, Some(meta), &tmp)
        .map_err(|e| Error::Validation(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Validation(format!("not a checkpoint: {e}")))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Validation("checkpoint has no header".into()))?;
    let header: CheckpointHeader = serde_json::from_str(json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    Ok(header)
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(&bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (k, v) in tensors {
        if let Some(name) = k.strip_prefix("model.") {
            params.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix("optim.") {
            optimizer.insert(name.to_string(), v);
        } else {
            return Err(Error::Validation(format!("unexpected tensor `{k}` in checkpoint")));
        }
    }
    Ok(Checkpoint {
        header,
        params,
        optimizer,
    })
}

/// Refuses weights trained against a different embedding table.
pub fn check_table(header: &CheckpointHeader, fingerprint: &str, backend: &str) -> Result<()> {
    if header.table_fingerprint != fingerprint {
        return Err(Error::Validation(format!(
            "embedding table mismatch: checkpoint was trained with `{}` ({}), current table is `{backend}` ({fingerprint})",
            header.table_backend, header.table_fingerprint
        )));
    }
    Ok(())
}
