//! Binary checkpoints: magic line, JSON header line, little-endian f64
//! payload, trailing u64 element count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::{AdamW, OptimConfig};
use super::{ModelConfig, NetworkError, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"UNICO1\n";
const OPT_MAGIC: &[u8] = b"UNICO1-OPT\n";
const MAX_HEADER: usize = 1 << 16;

fn format_err(m: impl Into<String>) -> NetworkError {
    NetworkError::Format(m.into())
}

fn encode(magic: &[u8], header: &str, values: &[&[f64]]) -> Vec<u8> {
    let n: usize = values.iter().map(|v| v.len()).sum();
    let mut buf = Vec::with_capacity(magic.len() + header.len() + 1 + 8 * n + 8);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(header.as_bytes());
    buf.push(b'\n');
    for v in values.iter().flat_map(|s| s.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf
}

/// Splits a file into its header line and payload values.
fn decode<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(&'a str, Vec<f64>)> {
    let rest = bytes.strip_prefix(magic).ok_or_else(|| format_err("bad magic"))?;
    let end = rest.iter().take(MAX_HEADER).position(|&b| b == b'\n').ok_or_else(|| format_err("missing header line"))?;
    let header = std::str::from_utf8(&rest[..end]).map_err(|_| format_err("header is not UTF-8"))?;
    let body = &rest[end + 1..];
    if body.len() < 8 || (body.len() - 8) % 8 != 0 {
        return Err(format_err(format!("payload of {} bytes is not a whole number of values", body.len())));
    }
    let (data, tail) = body.split_at(body.len() - 8);
    let n = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if n != (data.len() / 8) as u64 {
        return Err(format_err(format!("length check failed: trailer says {n}, found {}", data.len() / 8)));
    }
    let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, values))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = serde_json::to_string(&model.config).map_err(|e| format_err(e.to_string()))?;
    fs::write(path, encode(CHECKPOINT_MAGIC, &header, &[&model.params]))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let (header, params) = decode(&bytes, CHECKPOINT_MAGIC)?;
    let config: ModelConfig = serde_json::from_str(header).map_err(|e| format_err(format!("header: {e}")))?;
    config.validate()?;
    Model::with_params(config, params).map_err(|e| format_err(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptHeader {
    config: OptimConfig,
    step: u64,
    samples_seen: u64,
    dataset_size: u64,
    params: usize,
}

/// Optimizer state is stored next to the checkpoint with an `.opt` suffix.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".opt");
    PathBuf::from(s)
}

pub fn save_optimizer(opt: &AdamW, checkpoint: &Path) -> Result<()> {
    let h = OptHeader {
        config: opt.config.clone(),
        step: opt.step,
        samples_seen: opt.samples_seen,
        dataset_size: opt.dataset_size,
        params: opt.m.len(),
    };
    let header = serde_json::to_string(&h).map_err(|e| format_err(e.to_string()))?;
    fs::write(optimizer_path(checkpoint), encode(OPT_MAGIC, &header, &[&opt.m, &opt.v]))?;
    Ok(())
}

pub fn load_optimizer(checkpoint: &Path) -> Result<AdamW> {
    let bytes = fs::read(optimizer_path(checkpoint))?;
    let (header, values) = decode(&bytes, OPT_MAGIC)?;
    let h: OptHeader = serde_json::from_str(header).map_err(|e| format_err(format!("header: {e}")))?;
    if values.len() != 2 * h.params || h.dataset_size == 0 {
        return Err(format_err("optimizer moments do not match the header"));
    }
    let (m, v) = values.split_at(h.params);
    Ok(AdamW {
        config: h.config,
        step: h.step,
        samples_seen: h.samples_seen,
        dataset_size: h.dataset_size,
        m: m.to_vec(),
        v: v.to_vec(),
    })
}
