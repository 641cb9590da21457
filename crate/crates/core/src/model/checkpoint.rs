//! CRCK checkpoint container. All integers and floats little-endian:
//!
//! ```text
//! "CRCK"  u32 version  u32 config_len  config (JSON, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f64 data[∏dims]
//! ```
//!
//! Trailing bytes are rejected.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::ModelConfig;
use crate::params::{ParamEntry, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_CONFIG: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint config differs from the expected model config")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        found: Box<ModelConfig>,
    },
    #[error("checkpoint tensors do not match the model parameters")]
    ParamMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    out.extend_from_slice(&json);
    out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for e in params.entries() {
        out.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
        out.extend_from_slice(e.name.as_bytes());
        out.write_u32::<LittleEndian>(e.shape.len() as u32).unwrap();
        for &d in &e.shape {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in &e.data {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |_| CheckpointError::Format(format!("truncated while reading {what}"))
}

fn read_bytes(cur: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>, CheckpointError> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(CheckpointError::Format(format!(
            "truncated while reading {what}"
        )));
    }
    let mut buf = vec![0; len];
    cur.read_exact(&mut buf).map_err(truncated(what))?;
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor::new(bytes);
    let magic = read_bytes(&mut cur, 4, "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config_len = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("config length"))? as usize;
    if config_len > MAX_CONFIG {
        return Err(CheckpointError::Format(format!(
            "config length {config_len} too large"
        )));
    }
    let json = read_bytes(&mut cur, config_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("tensor count"))? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = cur
            .read_u32::<LittleEndian>()
            .map_err(truncated("name length"))? as usize;
        if name_len > MAX_NAME {
            return Err(CheckpointError::Format(format!(
                "tensor {i}: name length {name_len} too large"
            )));
        }
        let name = String::from_utf8(read_bytes(&mut cur, name_len, "name")?)
            .map_err(|_| CheckpointError::Format(format!("tensor {i}: name is not UTF-8")))?;
        let rank = cur.read_u32::<LittleEndian>().map_err(truncated("rank"))? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::Format(format!(
                "tensor {name}: rank {rank} too large"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = cur.read_u64::<LittleEndian>().map_err(truncated("dims"))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Format(format!("tensor {name}: size overflow")))?;
            shape.push(d as usize);
        }
        let remaining = (bytes.len() as u64).saturating_sub(cur.position());
        if n.checked_mul(8).is_none_or(|b| b > remaining) {
            return Err(CheckpointError::Format(format!(
                "tensor {name}: data truncated"
            )));
        }
        let mut data = vec![0.0; n as usize];
        cur.read_f64_into::<LittleEndian>(&mut data)
            .map_err(truncated("data"))?;
        entries.push(ParamEntry { name, shape, data });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.position() as usize
        )));
    }
    Ok(Checkpoint {
        config,
        params: ParamStore::from_entries(entries),
    })
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ParamStore,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(config, params))?;
    Ok(())
}

/// Reads a checkpoint without checking it against any model.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Reads a checkpoint and checks its config and tensors against `expected`.
pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<ParamStore, CheckpointError> {
    let ck = read_checkpoint(path)?;
    if &ck.config != expected {
        return Err(CheckpointError::ConfigMismatch {
            expected: Box::new(expected.clone()),
            found: Box::new(ck.config),
        });
    }
    let model =
        super::CrSwin2Vt::new(ck.config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if !ck.params.matches(model.param_specs()) {
        return Err(CheckpointError::ParamMismatch);
    }
    Ok(ck.params)
}
