//! Self-describing binary container used for checkpoints and resumable state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, free-form metadata, tensor table), then little-endian `f32`
//! tensor data in table order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FOCCONT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), Tensor { shape, data });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let data = &bytes[20 + header_len..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` shape {:?} disagrees with length {}",
                    e.name, e.shape, e.len
                )));
            }
            let raw = data
                .get(e.offset * 4..(e.offset + e.len) * 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(
                e.name,
                Tensor {
                    shape: e.shape,
                    data: values,
                },
            );
        }
        Ok(Container {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_tensors_and_metadata() {
        let mut c = Container::new("model", serde_json::json!({"a": 1}));
        c.insert("w", vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]);
        c.insert("b", vec![1], vec![0.25]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, "model");
        assert_eq!(back.metadata["a"], 1);
        assert_eq!(back.tensors, c.tensors);
    }

    #[test]
    fn rejects_garbage_and_future_versions() {
        assert!(Container::from_bytes(b"hello world, not a checkpoint").is_err());
        let mut bytes = Container::new("m", serde_json::Value::Null).to_bytes();
        bytes[8] = 99;
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }
}
