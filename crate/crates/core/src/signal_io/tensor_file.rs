//! Fixed-layout binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "DCAE"
//! version u16
//! rank    u8
//! dims    rank x u64
//! payload product(dims) x f32, row-major IEEE-754
//! ```
//!
//! The round trip is bit-exact for all finite values.

use std::fs;
use std::path::Path;
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"DCAE";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}, expected \"DCAE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u16),
    #[error("length mismatch: dims {dims:?} require {expected} payload bytes, file holds {actual}")]
    ChecksumOrLengthMismatch {
        dims: Vec<u64>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f32]) -> Result<(), TensorFileError> {
    let expected: u64 = dims.iter().product();
    assert_eq!(
        expected as usize,
        data.len(),
        "dims {dims:?} disagree with {} values",
        data.len()
    );
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorFileError::NonFinite(i));
    }
    let mut buf = Vec::with_capacity(7 + dims.len() * 8 + data.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f32>), TensorFileError> {
    let bytes = fs::read(path)?;
    let truncated = |need: usize| TensorFileError::ChecksumOrLengthMismatch {
        dims: Vec::new(),
        expected: need,
        actual: bytes.len(),
    };
    if bytes.len() < 7 {
        return Err(truncated(7));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != TENSOR_MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    let rank = bytes[6] as usize;
    let header_len = 7 + rank * 8;
    if bytes.len() < header_len {
        return Err(truncated(header_len));
    }
    let dims: Vec<u64> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[7 + i * 8..15 + i * 8].try_into().unwrap()))
        .collect();
    let count: u64 = dims.iter().product();
    let expected = header_len + count as usize * 4;
    if bytes.len() != expected {
        return Err(TensorFileError::ChecksumOrLengthMismatch {
            dims,
            expected: count as usize * 4,
            actual: bytes.len() - header_len,
        });
    }
    let data = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}
