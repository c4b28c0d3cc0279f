//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `HEROCKPT` |
//! | 4     | u32 format version |
//! | 8     | u64 header length `n` |
//! | n     | UTF-8 JSON header: run config, its hash, parameter table |
//! | rest  | parameter values as f64, concatenated in table order |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeroModel, InputShape};
use crate::config::HeroConfig;
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HEROCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Index of the first value in the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: HeroConfig,
    config_hash: String,
    params: Vec<ParamEntry>,
    values: usize,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::invalid("checkpoint", msg)
}

pub fn save_checkpoint<R: Real>(path: &Path, config: &HeroConfig, model: &HeroModel<R>) -> Result<()> {
    let mut params = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            offset,
        });
        offset += p.value().len();
        for v in p.value().to_f64_vec() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
        params,
        values: offset,
    };
    let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    }
    fs::write(path, bytes).map_err(|e| err(format!("{}: {e}", path.display())))
}

/// Rebuilds the model described by the stored config and fills in the stored values.
pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(HeroConfig, HeroModel<R>)> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| err(e.to_string()))?;
    if header.config.hash() != header.config_hash {
        return Err(err("config hash does not match the stored config"));
    }
    let data = &bytes[20 + len..];
    if data.len() != header.values * 8 {
        return Err(err(format!("data section holds {} bytes, expected {}", data.len(), header.values * 8)));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let cfg = header.config;
    let mut model = HeroModel::new(&cfg.model, InputShape::from(&cfg.world), cfg.train.seed)?;
    if model.store.len() != header.params.len() {
        return Err(err(format!(
            "checkpoint has {} parameters, the configured model {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for p in header.params {
        let id = model.store.id_of(&p.name).ok_or(TensorError::UnknownParameter(p.name.clone()))?;
        let n: usize = p.shape.iter().product();
        let slice = values.get(p.offset..p.offset + n).ok_or_else(|| err(format!("{} outside data", p.name)))?;
        model.store.set_value(id, Tensor::from_f64(p.shape, slice)?)?;
    }
    Ok((cfg, model))
}
