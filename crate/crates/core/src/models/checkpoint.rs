//! Named-tensor checkpoint files.
//!
//! Layout (all integers u32 little-endian, floats f32 little-endian):
//!
//! ```text
//! "ADVF" | version | record count
//! per record: name length | UTF-8 name | rank | dims[rank] | values[prod(dims)]
//! metadata:   length | UTF-8 canonical JSON
//! ```
//!
//! The metadata block follows the records and is not included in the count.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADVF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after metadata")]
    TrailingBytes(usize),
    #[error("record name or metadata is not UTF-8")]
    Utf8,
    #[error("invalid record {name}: {reason}")]
    InvalidRecord { name: String, reason: String },
    #[error("metadata is not a valid configuration: {0}")]
    Metadata(#[source] serde_json::Error),
    #[error("missing record {0}")]
    MissingRecord(String),
    #[error("expected {expected} records, found {found}")]
    RecordCount { expected: usize, found: usize },
    #[error("record {name} has shape {found:?}, expected {expected:?}")]
    RecordShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Ordered named tensors plus a JSON metadata string.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
    pub metadata: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.records.len() as u32);
        for (name, t) in &self.records {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_str(&mut out, &self.metadata);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::InvalidRecord {
                    name: name.clone(),
                    reason: "element count overflows".into(),
                })?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(buf.len()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::InvalidRecord {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            records.push((name, t));
        }
        let metadata = r.string()?;
        if r.pos != buf.len() {
            return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
        }
        Ok(Self { records, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            records: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("b.bias".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
            metadata: r#"{"k":1}"#.into(),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"ADVF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, t1), (n2, t2)) in ck.records.iter().zip(&back.records) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::TrailingBytes(1))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));
    }
}
