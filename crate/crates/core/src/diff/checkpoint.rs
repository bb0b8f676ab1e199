//! Binary parameter container.
//!
//! Layout: the 8-byte magic `DSAGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian value blocks in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffArray, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSAGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the block, relative to the end of the header.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ManifestEntry>,
}

/// Decoded checkpoint; values are kept as `f64` regardless of stored dtype.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f64>>,
}

pub fn encode_checkpoint<T: Scalar>(
    meta: &BTreeMap<String, String>,
    params: &[(String, DiffArray<T>)],
) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(params.len());
    for (name, p) in params {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += p.len() * T::BYTES;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        params: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params {
        for &v in p.data().iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let body = &bytes[body_start..];
    let mut values = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        let block = body
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("block `{}` out of range", e.name)))?;
        let vals = block
            .chunks_exact(width)
            .map(|c| if width == 4 { f32::read_le(c) as f64 } else { f64::read_le(c) })
            .collect();
        values.push(vals);
    }
    Ok(Checkpoint { header, values })
}

impl Checkpoint {
    /// Copies stored values into `params`, checking every name and shape
    /// against the manifest.
    pub fn restore_into<T: Scalar>(&self, params: &[(String, DiffArray<T>)]) -> Result<()> {
        if params.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, model has {}",
                self.header.params.len(),
                params.len()
            )));
        }
        for ((name, p), entry) in params.iter().zip(&self.header.params) {
            if *name != entry.name || p.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    name,
                    p.shape(),
                    entry.name,
                    entry.shape
                )));
            }
        }
        for ((_, p), vals) in params.iter().zip(&self.values) {
            let mut dst = p.data_mut();
            dst.iter_mut().zip(vals).for_each(|(d, &v)| *d = T::lit(v));
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    params: &[(String, DiffArray<T>)],
) -> Result<()> {
    let bytes = encode_checkpoint(meta, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
