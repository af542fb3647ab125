//! Binary container shared by PEFT files and checkpoints:
//! `magic (4 bytes) | u32 version | u32 header length | JSON header | payload`.
//! The header lists every tensor with its shape and byte offset into the
//! payload; values are little-endian f32 or f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    meta: Value,
    tensors: Vec<Entry>,
}

pub fn encode(magic: &[u8; 4], version: u32, dtype: Dtype, meta: Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        dtype,
        meta,
        tensors: entries,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Decoded container contents, in file order.
pub struct Decoded {
    pub meta: Value,
    pub dtype: Dtype,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<Decoded> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let found = word(4);
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let header_len = word(8) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &body[header_len..];
    let w = header.dtype.width();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_end = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * w;
        if e.offset != expected_end || end > payload.len() {
            return Err(Error::Format(format!("tensor {} has an invalid byte range", e.name)));
        }
        expected_end = end;
        let data = payload[e.offset..end]
            .chunks_exact(w)
            .map(|c| match header.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if expected_end != payload.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(Decoded {
        meta: header.meta,
        dtype: header.dtype,
        tensors,
    })
}
