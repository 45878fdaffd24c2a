//! `ACTD` v1 activation dumps.
//!
//! ```text
//! 0..4    magic "ACTD"
//! 4       version (1)
//! 5       dtype tag: 1 = f32, 2 = f64
//! 6..8    reserved, zero
//! 8..16   n_tokens, u64 LE
//! 16..24  dim, u64 LE
//! 24..    row-major values, LE
//! ```

use std::fs;
use std::path::Path;

use super::ActivationBatch;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ACTD";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpDtype {
    F32,
    F64,
}

impl DumpDtype {
    fn tag(self) -> u8 {
        match self {
            DumpDtype::F32 => 1,
            DumpDtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            DumpDtype::F32 => 4,
            DumpDtype::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DumpDtype::F32),
            2 => Some(DumpDtype::F64),
            _ => None,
        }
    }
}

/// Writes the batch as 64-bit floats, which round-trips bit-exactly.
pub fn write_dump(batch: &ActivationBatch, path: impl AsRef<Path>) -> Result<()> {
    write_dump_as(batch, path, DumpDtype::F64)
}

pub fn write_dump_as(batch: &ActivationBatch, path: impl AsRef<Path>, dtype: DumpDtype) -> Result<()> {
    fs::write(path, encode(batch, dtype))?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(batch: &ActivationBatch, dtype: DumpDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + batch.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.tag());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(batch.n_tokens() as u64).to_le_bytes());
    out.extend_from_slice(&(batch.dim() as u64).to_le_bytes());
    for &v in batch.data() {
        match dtype {
            DumpDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DumpDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ActivationBatch> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ACTD\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DumpDtype::from_tag(bytes[5])
        .ok_or_else(|| Error::format(5, format!("unknown dtype tag {}", bytes[5])))?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::format(6, "reserved bytes must be zero"));
    }
    let n_tokens = read_u64(bytes, 8);
    let dim = read_u64(bytes, 16);
    if n_tokens == 0 {
        return Err(Error::format(8, "n_tokens is zero"));
    }
    if dim == 0 {
        return Err(Error::format(16, "dim is zero"));
    }

    let count = n_tokens
        .checked_mul(dim)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format(8, "n_tokens * dim overflows"))?;
    let expected = count
        .checked_mul(dtype.width())
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(8, "payload size overflows"))?;
    if bytes.len() < expected {
        let whole = (bytes.len() - HEADER_LEN) / dtype.width();
        return Err(Error::format(
            (HEADER_LEN + whole * dtype.width()) as u64,
            format!(
                "truncated payload: header declares {count} values, file holds {whole}"
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }

    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        DumpDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DumpDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (HEADER_LEN + pos * dtype.width()) as u64,
            "non-finite value",
        ));
    }
    ActivationBatch::new(data, n_tokens as usize, dim as usize, 0)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ActivationBatch {
        ActivationBatch::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.25], vec![-1e-300, 7.0]], 0)
            .unwrap()
    }

    fn offset(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        write_dump(&small(), &path).unwrap();
        assert_eq!(read_dump(&path).unwrap(), small());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&small(), DumpDtype::F64);
        assert_eq!(&bytes[..8], b"ACTD\x01\x02\x00\x00");
        assert_eq!(read_u64(&bytes, 8), 3);
        assert_eq!(read_u64(&bytes, 16), 2);
        assert_eq!(bytes.len(), 24 + 6 * 8);
    }

    #[test]
    fn f32_payload_decodes() {
        let bytes = encode(&small(), DumpDtype::F32);
        assert_eq!(bytes[5], 1);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.token(0), &[1.5, -2.0]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&small(), DumpDtype::F64);
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(offset(decode(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn version_and_dtype_errors() {
        let mut bytes = encode(&small(), DumpDtype::F64);
        bytes[4] = 2;
        assert_eq!(offset(decode(&bytes).unwrap_err()), 4);
        let mut bytes = encode(&small(), DumpDtype::F64);
        bytes[5] = 9;
        assert_eq!(offset(decode(&bytes).unwrap_err()), 5);
    }

    #[test]
    fn truncated_payload() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let batch = ActivationBatch::from_rows(&rows, 0).unwrap();
        let mut bytes = encode(&batch, DumpDtype::F64);
        // Drop the last token: header still claims 10.
        bytes.truncate(bytes.len() - 16);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
        assert_eq!(offset(err), 24 + 18 * 8);
    }

    proptest! {
        #[test]
        fn dump_round_trip_is_identity(
            n in 1usize..12,
            d in 1usize..9,
            seed in proptest::collection::vec(-1e6f64..1e6, 108),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(n * d).copied().collect();
            let batch = ActivationBatch::new(data, n, d, 0).unwrap();
            let back = decode(&encode(&batch, DumpDtype::F64)).unwrap();
            prop_assert_eq!(back, batch);
        }
    }
}
