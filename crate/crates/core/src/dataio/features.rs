//! Snippet feature files.
//!
//! Layout (little-endian): `b"MCWF"`, version `u32` (= 1), `T` `u32`, `D` `u32`,
//! then `T·D` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MCWF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Writes a `T × D` matrix. Values are narrowed to `f32`.
pub fn write_features(path: &Path, values: &Tensor) -> Result<()> {
    let (t, d) = values.dims2()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in values.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn decode(buf: &[u8]) -> std::result::Result<Tensor, String> {
    if buf.len() < HEADER_LEN {
        return Err("malformed header: file too short".into());
    }
    if &buf[..4] != MAGIC {
        return Err("malformed header: bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(format!("malformed header: unsupported version {version}"));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * t * d;
    if buf.len() != expected {
        return Err(format!(
            "malformed header: {t}x{d} needs {expected} bytes, file has {}",
            buf.len()
        ));
    }
    let data = buf[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data).map_err(|e| e.to_string())
}
