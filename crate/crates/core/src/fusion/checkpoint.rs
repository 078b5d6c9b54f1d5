//! Checkpoint container: magic, JSON header with the model config and
//! parameter table, then every parameter as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::FusionModel;
use super::params::{ParamGroup, ParamSet};
use super::tensor::Tensor;
use super::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CHFUSECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    /// Index of the first value in the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

pub fn encode_checkpoint(model: &FusionModel) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|(_, p)| {
            let e = Entry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FusionModel> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated header"))?)?;
    let data = &body[hlen..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamSet::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} runs past the data", e.name)))?;
        params.add(e.name.clone(), e.group, Tensor::new(e.shape.clone(), slice.to_vec())?);
    }
    if params.scalar_count() != values.len() {
        return Err(bad("data section length does not match the parameter table"));
    }
    let mut model = FusionModel::new(header.config, 0)?;
    model.load_params(params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &FusionModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its config equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<FusionModel> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config {:?} does not match {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
