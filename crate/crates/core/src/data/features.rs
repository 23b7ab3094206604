//! Feature-vector export: 8-byte magic `GCFV0001`, u32 vector length,
//! u32 count (little-endian), then `count * length` f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"GCFV0001";

const HEADER: usize = 16;

/// Encodes rows of a `[count, len]` tensor.
pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 {
        return Err(Error::Dimension(format!(
            "feature matrix must be [count, len], got {:?}",
            features.shape()
        )));
    }
    let (count, len) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(HEADER + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            offset: 0,
            needed: HEADER - bytes.len(),
        });
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER + 4 * len * count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            needed: expected - bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after feature records",
            bytes.len() - expected
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![count, len], data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_features(&fs::read(path)?)
}
