//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic        8 bytes  "GCCN0001"
//! version      u32
//! fingerprint  u32 length + bytes   "<precision>:<sha256 hex of canonical config>"
//! tensors      u32 count, then per tensor:
//!                u32 name length + bytes, u32 rank, rank x u64 dims,
//!                raw values (f32 or f64 per the fingerprint's precision tag)
//! config       u32 length + canonical config text
//! rng          32-byte seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCCN0001";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hex SHA-256 of the canonical config.
    pub fingerprint: String,
    pub precision: Precision,
    pub tensors: Vec<(String, Tensor)>,
    /// Canonical config text the fingerprint was computed from.
    pub config_text: String,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, format!("{}:{}", self.precision, self.fingerprint).as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let tagged = r.string()?;
        let (prec, fingerprint) = tagged
            .split_once(':')
            .ok_or_else(|| Error::Format("fingerprint lacks a precision tag".into()))?;
        let precision: Precision = prec
            .parse()
            .map_err(|_| Error::Format(format!("unknown precision tag `{prec}`")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(precision.bytes()).ok_or_else(|| {
                Error::Format(format!("tensor `{name}` is too large"))
            })?)?;
            let data = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let config_text = r.string()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            fingerprint: fingerprint.to_string(),
            precision,
            tensors,
            config_text,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 in checkpoint string".into()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Reads a checkpoint; with `expected_fingerprint`, a mismatch is an error.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_bytes(&fs::read(path)?)?;
    if let Some(fp) = expected_fingerprint {
        if fp != ckpt.fingerprint {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match config fingerprint {fp}",
                ckpt.fingerprint
            )));
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample(precision: Precision) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        Checkpoint {
            fingerprint: "abc123".into(),
            precision,
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap()),
                ("s".into(), Tensor::scalar(4.0)),
            ],
            config_text: "ways = 5\n".into(),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_exact() {
        let c = sample(Precision::F64);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn f32_values_are_narrowed() {
        let mut c = sample(Precision::F32);
        c.tensors[0].1.data_mut()[3] = 0.1;
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors[0].1.data()[3], 0.1f32 as f64);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..17 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Precision::F64).to_bytes();
        assert_eq!(&bytes[..8], b"GCCN0001");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let flen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + flen], b"f64:abc123");
        let count = u32::from_le_bytes(bytes[16 + flen..20 + flen].try_into().unwrap());
        assert_eq!(count, 2);
    }

    #[test]
    fn corrupted_magic_and_fingerprint_mismatch() {
        let mut bytes = sample(Precision::F64).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gccn");
        save_checkpoint(&path, &sample(Precision::F64)).unwrap();
        assert!(load_checkpoint(&path, Some("abc123")).is_ok());
        assert!(matches!(load_checkpoint(&path, Some("other")), Err(Error::Config(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample(Precision::F64).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..30]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }
}
