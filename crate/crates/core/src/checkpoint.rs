//! Tensor files: a little-endian `u64` header length, a JSON header listing
//! `(name, shape, offset)` for every tensor, then the raw little-endian `f64`
//! payload. Offsets are in bytes from the start of the payload.
//!
//! Used for model checkpoints and for standalone embedding tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "regcap-tensors-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode(params: &ParamStore, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let header = Header {
        format: FORMAT.to_string(),
        tensors,
        frozen: params.frozen_names().cloned().collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Header)> {
    let short = || Error::Load("tensor file truncated".to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize.checked_add(header_len).ok_or_else(short)?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(short)?)
        .map_err(|e| Error::Load(format!("bad tensor file header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Load(format!(
            "unsupported tensor file format `{}`",
            header.format
        )));
    }
    let payload = &bytes[header_end..];
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Load(format!("tensor `{}` extends past end of file", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    for name in &header.frozen {
        store.set_frozen(name, true);
    }
    Ok((store, header))
}

pub fn save(path: &Path, params: &ParamStore, metadata: serde_json::Value) -> Result<()> {
    let bytes = encode(params, metadata)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
