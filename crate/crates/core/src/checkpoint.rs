//! Flat named-tensor files.
//!
//! Layout: the 8-byte magic `GARCKPT1`, a little-endian `u64` header length,
//! a JSON header `{"meta": .., "tensors": [{"name", "shape"}, ..]}`, then every
//! tensor's data as little-endian `f64` in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"GARCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn encode(meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut pos = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * n;
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, tensors))
}

pub fn write(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Prefixed entries of `store`, in name order.
pub fn entries<'a>(prefix: &str, store: &'a ParamStore) -> Vec<(String, &'a Tensor)> {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Collects entries carrying `prefix` into a store, stripping it.
pub fn collect(prefix: &str, tensors: &[(String, Tensor)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(prefix) {
            store.insert(rest, t.clone());
        }
    }
    store
}
