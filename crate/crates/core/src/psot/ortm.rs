//! `ORTM` v1 transform files.
//!
//! ```text
//! 0..4    magic "ORTM"
//! 4       version (1)
//! 5..8    reserved, zero
//! 8..16   block count, u64 LE
//! ...     block dims, u64 LE each
//! ...     blocks in order, row-major f64 LE
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::transform::OrthoTransform;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ORTM";
const VERSION: u8 = 1;

pub fn write_transform(t: &OrthoTransform, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<OrthoTransform> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(t: &OrthoTransform) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(t.blocks().len() as u64).to_le_bytes());
    for d in t.block_dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for m in t.blocks() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

fn u64_at(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len() as u64, "unexpected end of file"))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<OrthoTransform> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ORTM\""));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(Error::format(4, format!("unsupported version {v}"))),
        None => return Err(Error::format(4, "unexpected end of file")),
    }
    if bytes.get(5..8).is_some_and(|r| r != [0, 0, 0]) {
        return Err(Error::format(5, "reserved bytes must be zero"));
    }
    let count = u64_at(bytes, 8)? as usize;
    if count == 0 {
        return Err(Error::format(8, "block count is zero"));
    }
    let mut dims = Vec::with_capacity(count.min(1 << 16));
    for b in 0..count {
        let d = u64_at(bytes, 16 + 8 * b)? as usize;
        if d == 0 {
            return Err(Error::format((16 + 8 * b) as u64, "block dimension is zero"));
        }
        dims.push(d);
    }
    let mut pos = 16 + 8 * count;
    let mut blocks = Vec::with_capacity(count);
    for &d in &dims {
        let len = d
            .checked_mul(d)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(pos as u64, "block size overflows"))?;
        let raw = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated block payload"))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(DMatrix::from_row_slice(d, d, &values));
        pos += len;
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after last block"));
    }
    OrthoTransform::from_blocks(blocks)
}
