//! Dense Tensor File (DTF).
//!
//! Layout: magic `DRTF`, format version (`u32` LE), header length (`u32` LE),
//! a UTF-8 JSON header `{"dtype":"f64","shape":[...],"order":"row-major"}`,
//! then the row-major little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRTF";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let header = Header { dtype: "f64".into(), shape: t.shape().to_vec(), order: "row-major".into() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fmt("missing DRTF magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DTF version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad DTF header: {e}")))?;
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let payload = &bytes[12 + hlen..];
    let n: usize = header.shape.iter().product();
    if payload.len() != 8 * n {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            8 * n
        )));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(header.shape, data)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
