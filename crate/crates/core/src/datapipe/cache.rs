//! Binary dataset cache: magic `GARDATA1`, little-endian `u64` header length,
//! JSON header, then the panel returns as little-endian `f64`.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{ReturnPanel, Split, WindowDataset};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GARDATA1";

#[derive(Debug, Clone, PartialEq)]
pub enum Cached {
    Panel(ReturnPanel),
    Windows(WindowDataset),
}

impl Cached {
    pub fn panel(&self) -> &ReturnPanel {
        match self {
            Cached::Panel(p) => p,
            Cached::Windows(w) => &w.panel,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WindowHeader {
    cond_len: usize,
    horizon: usize,
    stride: usize,
    starts: Vec<usize>,
    splits: Vec<Option<Split>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    dropped_rows: usize,
    windows: Option<WindowHeader>,
}

pub fn write_cache(path: &Path, data: &Cached) -> Result<()> {
    let panel = data.panel();
    let windows = match data {
        Cached::Panel(_) => None,
        Cached::Windows(w) => Some(WindowHeader {
            cond_len: w.cond_len,
            horizon: w.horizon,
            stride: w.stride,
            starts: w.starts.clone(),
            splits: w.splits.clone(),
        }),
    };
    let header = Header {
        dates: panel.dates.clone(),
        assets: panel.assets.clone(),
        dropped_rows: panel.dropped_rows,
        windows,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * panel.returns.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in &panel.returns {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Cached> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset cache"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let body = &bytes[16 + len..];
    if body.len() != 8 * header.dates.len() * header.assets.len() {
        return Err(bad("body size does not match header"));
    }
    let returns = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let panel = ReturnPanel {
        dates: header.dates,
        assets: header.assets,
        returns,
        dropped_rows: header.dropped_rows,
    };
    panel.validate()?;
    Ok(match header.windows {
        None => Cached::Panel(panel),
        Some(w) => {
            let ds = WindowDataset {
                panel,
                cond_len: w.cond_len,
                horizon: w.horizon,
                stride: w.stride,
                starts: w.starts,
                splits: w.splits,
            };
            if ds.starts.len() != ds.splits.len()
                || ds.starts.iter().any(|s| s + ds.cond_len + ds.horizon > ds.panel.n_rows())
            {
                return Err(bad("window table inconsistent with panel"));
            }
            Cached::Windows(ds)
        }
    })
}
