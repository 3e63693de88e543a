//! Tensor archive used for checkpoints and raw clip dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "KFDA" | version u16 | manifest length u64 | manifest (JSON) | data
//! ```
//!
//! The manifest holds a free-form `meta` object and a `tensors` list of
//! `{name, shape, dtype, offset}` entries; `offset` is the byte position of
//! the tensor inside the data section. Tensors are stored as float32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KFDA";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode(meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            offset: data.len() as u64,
        });
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < HEADER_LEN {
        return format_err(bytes.len(), "truncated archive header");
    }
    if &bytes[..4] != MAGIC {
        return format_err(0, "bad archive magic");
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return format_err(4, format!("unsupported archive version {version}"));
    }
    let mlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let data_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .map_or_else(|| format_err(HEADER_LEN, "manifest extends past end of file"), Ok)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..data_start])
        .map_err(|e| Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!("bad manifest: {e}"),
        })?;
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    let mut expected_end = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return format_err(HEADER_LEN, format!("tensor {} has unsupported dtype {}", e.name, e.dtype));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return format_err(data_start + data.len(), format!("tensor {} truncated", e.name));
        }
        let vals: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(vals, e.shape.as_slice(), &Device::Cpu)?);
        expected_end = expected_end.max(end);
    }
    if expected_end != data.len() {
        return format_err(data_start + expected_end, "trailing bytes after last tensor");
    }
    Ok(Archive {
        meta: manifest.meta,
        tensors,
    })
}

pub fn write(path: &Path, meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode(meta, tensors)?)
}

pub fn read(path: &Path) -> Result<Archive> {
    decode(&std::fs::read(path)?)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never sees a partially written file under `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
