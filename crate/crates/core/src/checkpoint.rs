//! Single-file tensor container.
//!
//! Layout: `u64` little-endian header length, a UTF-8 JSON header mapping each
//! name to `{dtype, shape, byte_offset}` (offsets relative to the data section,
//! in header order), then the tensors as contiguous little-endian data.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{LabError, Result};
use crate::nn::TensorMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(LabError::config(format!("checkpoint: unsupported dtype {other:?}"))),
    }
}

/// Serializes tensors in map order.
pub fn to_bytes(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        let dtype = dtype_name(t.dtype())?;
        let entry = TensorEntry { dtype: dtype.into(), shape: t.dims().to_vec(), byte_offset: data.len() as u64 };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses a container, keeping only names that start with `prefix`.
pub fn from_bytes(bytes: &[u8], prefix: &str) -> Result<TensorMap> {
    let integrity = |offset: u64, reason: String| LabError::Integrity { offset, reason };
    if bytes.len() < 8 {
        return Err(integrity(0, format!("file of {} bytes has no header length", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let data_start = 8u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
        integrity(8, format!("header length {hlen} exceeds file size {}", bytes.len()))
    })?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..data_start as usize])
        .map_err(|e| integrity(8, format!("corrupt header: {e}")))?;
    let data = &bytes[data_start as usize..];
    let mut expected = 0u64;
    let mut out = TensorMap::new();
    for (name, v) in header {
        let entry: TensorEntry =
            serde_json::from_value(v).map_err(|e| integrity(8, format!("bad entry for {name}: {e}")))?;
        let width = match entry.dtype.as_str() {
            "f32" => 4u64,
            "f64" => 8,
            other => return Err(integrity(8, format!("{name}: unknown dtype {other:?}"))),
        };
        if entry.byte_offset != expected {
            return Err(integrity(
                data_start + entry.byte_offset,
                format!("{name}: offset {} but previous tensor ends at {expected}", entry.byte_offset),
            ));
        }
        let n: u64 = entry.shape.iter().map(|&d| d as u64).product();
        let end = expected + n * width;
        if end > data.len() as u64 {
            return Err(integrity(
                data_start + data.len() as u64,
                format!("{name}: needs bytes up to {} but data ends at {} (truncated)", data_start + end, data_start + data.len() as u64),
            ));
        }
        if name.starts_with(prefix) {
            let raw = &data[expected as usize..end as usize];
            let t = if width == 4 {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            };
            out.insert(name, t);
        }
        expected = end;
    }
    if expected != data.len() as u64 {
        return Err(integrity(data_start + expected, format!("{} trailing bytes", data.len() as u64 - expected)));
    }
    Ok(out)
}

/// Writes through a temporary file and a rename so readers never see a partial file.
pub fn save(path: &Path, tensors: &TensorMap) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap> {
    load_prefix(path, "")
}

pub fn load_prefix(path: &Path, prefix: &str) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::MissingInput(format!("checkpoint {}", path.display())),
        _ => e.into(),
    })?;
    from_bytes(&bytes, prefix)
}

/// Entries whose names start with `prefix`, with the prefix removed.
pub fn strip_prefix(map: &TensorMap, prefix: &str) -> TensorMap {
    map.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))).collect()
}

pub fn add_prefix(map: &TensorMap, prefix: &str) -> TensorMap {
    map.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect()
}
