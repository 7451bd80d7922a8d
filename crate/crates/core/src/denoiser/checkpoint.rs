//! Checkpoint files.
//!
//! Layout: magic `FSN1`, a little-endian `u32` version, a little-endian
//! `u64` header length, the JSON header, then every parameter as raw
//! little-endian `f64` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FSN1";
pub const VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Seed of the frozen text-embedding tables.
    pub text_seed: u64,
    pub vocab_size: usize,
    /// Optimizer steps taken so far, across all stages.
    pub step: u64,
    /// `"init"`, `"pretrain"` or `"finetune"`.
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DenoiserConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn manifest(model: &Denoiser) -> Vec<ParamEntry> {
    model.named_params().iter().map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() }).collect()
}

pub fn encode(model: &Denoiser, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header { config: model.config().clone(), meta: meta.clone(), params: manifest(model) };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.named_params() {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(Denoiser, CheckpointMeta)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(bad("missing FSN1 magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let model = Denoiser::new(header.config)?;
    if header.params != manifest(&model) {
        return Err(bad("parameter manifest does not match the configuration"));
    }
    let mut raw = &buf[16 + hlen..];
    if raw.len() != 8 * model.param_count() {
        return Err(bad(&format!("{} payload bytes for {} parameters", raw.len(), model.param_count())));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let (chunk, rest) = raw.split_at(8 * n);
        values.push(chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
        raw = rest;
    }
    model.load_values(&values)?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &Denoiser, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Denoiser, CheckpointMeta)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
