//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSMD" | u32 version (= 1) | u64 header length | JSON header | payloads
//! ```
//!
//! The JSON header is `{"meta": {...}, "tensors": [{"name", "shape",
//! "count"}, ...]}`; payloads are the tensors' FP64 values concatenated in
//! header order.

use super::{BufferMode, MambaConfig, MambaParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SSMD";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes: expected \"SSMD\"")]
    BadMagic,
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("unexpected end of header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    Header(String),
    #[error(
        "tensor `{name}`: shape/payload mismatch (shape {shape:?} holds {expected} elements, header lists {count})"
    )]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        count: usize,
    },
    #[error("tensor `{name}`: unexpected end of tensor data")]
    UnexpectedEof { name: String },
    #[error("trailing bytes after tensor data")]
    TrailingBytes,
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    WrongShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("header field `{0}` missing or invalid")]
    Meta(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Map<String, Value>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Remove and return a tensor, checking its shape when `shape` is given.
    pub fn take(&mut self, name: &str, shape: Option<&[usize]>) -> Result<Tensor, CheckpointError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let (_, t) = self.tensors.remove(idx);
        if let Some(shape) = shape {
            if t.shape() != shape {
                return Err(CheckpointError::WrongShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(t)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64, CheckpointError> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| CheckpointError::Meta(key.to_string()))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64, CheckpointError> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| CheckpointError::Meta(key.to_string()))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| CheckpointError::Meta(key.to_string()))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool, CheckpointError> {
        self.meta
            .get(key)
            .and_then(Value::as_bool)
            .ok_or_else(|| CheckpointError::Meta(key.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    count: t.numel(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_header_bytes(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        read_header_bytes(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut len = [0u8; 8];
        read_header_bytes(&mut r, &mut len)?;
        let len = u64::from_le_bytes(len);
        if len > (1 << 32) {
            return Err(CheckpointError::Header(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        read_header_bytes(&mut r, &mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let expected: usize = entry.shape.iter().product();
            if expected != entry.count {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name,
                    shape: entry.shape,
                    expected,
                    count: entry.count,
                });
            }
            let mut bytes = vec![0u8; entry.count * 8];
            r.read_exact(&mut bytes).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => CheckpointError::UnexpectedEof {
                    name: entry.name.clone(),
                },
                _ => CheckpointError::Io(e),
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_header_bytes<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::TruncatedHeader,
        _ => CheckpointError::Io(e),
    })
}

/// Canonical tensor names for a block, in file order.
pub const MAMBA_TENSORS: [&str; 4] = ["a_log", "delta_bias", "fused.weight", "gate.weight"];

/// Write a block's tensors and config into `container`, names prefixed by `prefix`.
pub fn push_params(container: &mut Container, prefix: &str, params: &MambaParams) {
    let key = |k: &str| format!("{prefix}{k}");
    container.set_meta(&key("d"), params.d as u64);
    container.set_meta(&key("t_max"), params.t_max as u64);
    container.set_meta(&key("mode"), params.mode().name());
    container.set_meta(&key("gate_enabled"), params.gate_enabled);
    container.push(key("a_log"), params.a_log.clone());
    container.push(key("delta_bias"), params.delta_bias.clone());
    container.push(key("fused.weight"), params.fused.weight.clone());
    container.push(key("gate.weight"), params.gate_weight.clone());
}

/// Inverse of [`push_params`].
pub fn take_params(container: &mut Container, prefix: &str) -> Result<MambaParams, CheckpointError> {
    let key = |k: &str| format!("{prefix}{k}");
    let d = container.meta_u64(&key("d"))? as usize;
    let t_max = container.meta_u64(&key("t_max"))? as usize;
    let mode: BufferMode = container
        .meta_str(&key("mode"))?
        .parse()
        .map_err(|_| CheckpointError::Meta(key("mode")))?;
    let gate_enabled = container.meta_bool(&key("gate_enabled"))?;
    let config = MambaConfig {
        d,
        t_max,
        mode,
        gate_enabled,
    };
    let a_log = container.take(&key("a_log"), Some(&[d]))?;
    let delta_bias = container.take(&key("delta_bias"), Some(&[d]))?;
    let fused = container.take(&key("fused.weight"), Some(&[config.fused_rows(), 3 * d]))?;
    let gate = container.take(&key("gate.weight"), Some(&[d, d]))?;
    MambaParams::from_parts(config, a_log, fused, delta_bias, gate).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn save_checkpoint(params: &MambaParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut c = Container::new();
    c.set_meta("kind", "mamba-block");
    push_params(&mut c, "", params);
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MambaParams, CheckpointError> {
    let mut c = Container::load(path)?;
    if c.meta_str("kind")? != "mamba-block" {
        return Err(CheckpointError::Meta("kind".into()));
    }
    take_params(&mut c, "")
}
