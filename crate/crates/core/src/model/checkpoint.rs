//! Checkpoint layout, all little-endian:
//!
//! ```text
//! magic    b"TUM1"
//! version  u32
//! blocks   u32
//! per block: name_len u32, name bytes (utf-8), rows u32, cols u32
//! payload  f32 × Σ rows·cols, blocks in table order, row-major
//! ```
//!
//! A JSON sidecar with the same stem and a `.json` extension records the
//! model config and the payload digest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::corpus::content_hash;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TUM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub param_count: usize,
    pub blocks: Vec<BlockShape>,
    pub payload_sha256: String,
}

fn err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.display().to_string(), msg: msg.into() }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<CheckpointMeta, ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blocks = params.blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols as u32).to_le_bytes());
    }
    let payload_start = out.len();
    for v in params.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let meta = CheckpointMeta {
        format: "TUM1".into(),
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        param_count: params.len(),
        blocks: blocks
            .iter()
            .map(|b| BlockShape { name: b.name.to_string(), rows: b.rows, cols: b.cols })
            .collect(),
        payload_sha256: content_hash(&out[payload_start..]),
    };
    write_atomic(path, &out)?;
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| err(path, e.to_string()))?;
    write_atomic(&path.with_extension("json"), &json)?;
    Ok(meta)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Loads a checkpoint, checking its shape table against the sidecar config.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let meta_path = path.with_extension("json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| err(&meta_path, e.to_string()))?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let truncated = || err(path, "truncated");
    if c.take(4).ok_or_else(truncated)? != CHECKPOINT_MAGIC {
        return Err(err(path, "bad magic"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(path, format!("unsupported version {version}")));
    }
    let mut params = ModelParams::zeros(meta.config.clone())?;
    let expected = params.blocks();
    let count = c.u32().ok_or_else(truncated)? as usize;
    if count != expected.len() {
        return Err(err(path, format!("{count} blocks, expected {}", expected.len())));
    }
    for b in &expected {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = c.take(len).ok_or_else(truncated)?;
        let rows = c.u32().ok_or_else(truncated)? as usize;
        let cols = c.u32().ok_or_else(truncated)? as usize;
        if name != b.name.as_bytes() || rows != b.rows || cols != b.cols {
            return Err(err(
                path,
                format!("block {} has shape {rows}x{cols}, expected {}x{}", String::from_utf8_lossy(name), b.rows, b.cols),
            ));
        }
    }
    let payload = &bytes[c.pos..];
    if payload.len() != params.len() * 4 {
        return Err(err(path, format!("payload is {} bytes, expected {}", payload.len(), params.len() * 4)));
    }
    if content_hash(payload) != meta.payload_sha256 {
        return Err(err(path, "payload digest does not match the sidecar"));
    }
    for (v, chunk) in params.as_mut_slice().iter_mut().zip(payload.chunks_exact(4)) {
        *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    if !params.is_finite() {
        return Err(err(path, "non-finite parameter"));
    }
    Ok(params)
}
