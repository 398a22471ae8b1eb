//! Portable tensor container.
//!
//! Layout: the 8-byte magic `HFWT0001`, a little-endian `u32` header length,
//! a JSON header mapping tensor name to `{shape, offset, dtype: "f32"}`, then a
//! little-endian `f32` payload. Offsets are relative to the payload start and
//! 64-byte aligned. An optional `__metadata__` entry holds string pairs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"HFWT0001";
pub const ALIGN: usize = 64;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: unsupported dtype {dtype}")]
    Dtype { name: String, dtype: String },
    #[error("tensor {name}: offset {offset} is not {ALIGN}-byte aligned")]
    Misaligned { name: String, offset: usize },
    #[error("tensor {name}: data runs past the end of the payload")]
    OutOfBounds { name: String },
    #[error("tensor {name}: shape {shape:?} does not match {len} values")]
    ShapeLen {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("tensor {0}: contains non-finite values")]
    NonFinite(String),
    #[error("tensor name {0} is reserved")]
    Reserved(String),
}

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} vs {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
    dtype: String,
}

/// Named tensors plus string metadata, kept in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).map_err(|e| ContainerError::Header(e.to_string()))?,
            );
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(ContainerError::Reserved(name.clone()));
            }
            let entry = Entry {
                shape: t.shape.clone(),
                offset,
                dtype: "f32".into(),
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset = align(offset + 4 * t.len());
        }
        let header = serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| ContainerError::Header("header exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        let payload_start = out.len();
        for t in self.tensors.values() {
            out.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            out.resize(payload_start + align(out.len() - payload_start), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() {
            return Err(ContainerError::Truncated("missing magic".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let len_bytes: [u8; 4] = bytes
            .get(8..12)
            .ok_or_else(|| ContainerError::Truncated("missing header length".into()))?
            .try_into()
            .expect("four bytes");
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| ContainerError::Truncated(format!("header of {header_len} bytes")))?;
        let payload = &bytes[12 + header_len..];
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(header).map_err(|e| ContainerError::Header(e.to_string()))?;

        let mut out = Container::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                out.metadata = serde_json::from_value(value)
                    .map_err(|e| ContainerError::Header(format!("{METADATA_KEY}: {e}")))?;
                continue;
            }
            let entry: Entry =
                serde_json::from_value(value).map_err(|e| ContainerError::Header(format!("{name}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(ContainerError::Dtype {
                    name,
                    dtype: entry.dtype,
                });
            }
            if !entry.offset.is_multiple_of(ALIGN) {
                return Err(ContainerError::Misaligned {
                    name,
                    offset: entry.offset,
                });
            }
            let n: usize = entry
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ContainerError::Header(format!("{name}: shape overflows")))?;
            let end = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(entry.offset))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| ContainerError::OutOfBounds { name: name.clone() })?;
            let data: Vec<f32> = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ContainerError::NonFinite(name));
            }
            out.tensors.insert(
                name,
                Tensor {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Lower-case hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
