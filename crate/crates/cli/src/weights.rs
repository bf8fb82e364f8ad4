//! `.dpmw` weight files.
//!
//! Layout: `DPMW1\n`, a little-endian `u32` header length, a JSON header
//! mapping tensor names to `{dtype, shape, offset, nbytes}`, then the data
//! region. Offsets are relative to the start of the data region and every
//! tensor starts on a 64-byte boundary. The header is padded with spaces so
//! the data region itself starts 64-byte aligned in the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dpssm_core::params::Params;
use dpssm_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 6] = b"DPMW1\n";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(params: &Params) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut cursor = 0;
    for (name, t) in params.iter() {
        let nbytes = 4 * t.len();
        header.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: cursor,
                nbytes,
            },
        );
        cursor = align_up(cursor + nbytes);
    }
    let mut json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let prefix = MAGIC.len() + 4;
    json.resize(align_up(prefix + json.len()) - prefix, b' ');
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;

    let mut out = Vec::with_capacity(prefix + json.len() + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    let data_start = out.len();
    for (name, t) in params.iter() {
        let entry = &header[name];
        out.resize(data_start + entry.offset, 0);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.resize(data_start + cursor, 0);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return format_err("not a weight file (bad magic)");
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return format_err("truncated header length");
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return format_err(format!("header of {header_len} bytes is truncated"));
    }
    let header: BTreeMap<String, TensorEntry> =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let data = &rest[header_len..];

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(header.len());
    for (name, e) in &header {
        if e.dtype != "f32" {
            return format_err(format!("{name}: unsupported dtype {}", e.dtype));
        }
        let count: usize = e.shape.iter().product();
        if e.nbytes != 4 * count {
            return format_err(format!("{name}: nbytes {} does not match shape {:?}", e.nbytes, e.shape));
        }
        if e.offset % ALIGN != 0 {
            return format_err(format!("{name}: offset {} is not {ALIGN}-byte aligned", e.offset));
        }
        if e.offset.checked_add(e.nbytes).map_or(true, |end| end > data.len()) {
            return format_err(format!("{name}: data runs past the end of the file"));
        }
        spans.push((e.offset, e.nbytes, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return format_err(format!("{} overlaps {}", w[0].2, w[1].2));
        }
    }

    let mut params = Params::new();
    for (name, e) in header {
        let raw = &data[e.offset..e.offset + e.nbytes];
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return format_err(format!("{name}: non-finite value"));
        }
        params.insert(name, Tensor::new(&e.shape, values)?);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &Params) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params> {
    decode(&fs::read(path)?)
}
