//! Single-file model checkpoints.
//!
//! Layout: `"PNCK"`, u32 version, u64 manifest length, UTF-8 JSON manifest,
//! then every parameter's f32 little-endian values back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn encode(model: &str, config: serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable: store.is_trainable(id),
        });
        offset += t.len() * 4;
    }
    let manifest = Manifest {
        model: model.to_string(),
        config,
        params,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamStore)> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(mlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        if p.offset != expected_offset || p.offset + n * 4 > payload.len() {
            return Err(Error::Checkpoint(format!("parameter {} has an invalid payload range", p.name)));
        }
        let data = payload[p.offset..p.offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
        store.set_trainable(id, p.trainable);
        expected_offset += n * 4;
    }
    if expected_offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest describes {expected_offset}",
            payload.len()
        )));
    }
    Ok((manifest, store))
}

pub fn save(path: &Path, model: &str, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = encode(model, config, store)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
