//! Single-file checkpoint: magic, schema integer, JSON header, raw tensor bytes.
//!
//! Layout: `MAGIC (8) | schema u32 LE | header_len u64 LE | header JSON | data`.
//! Tensors are stored in name order as little-endian values of their dtype.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SMFCKPT\0";
pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
}

impl StoredDType {
    fn from_dtype(d: DType) -> Result<Self> {
        match d {
            DType::F32 => Ok(Self::F32),
            DType::F64 => Ok(Self::F64),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Host copy of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: StoredDType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dtype = StoredDType::from_dtype(t.dtype())?;
        let flat = t.flatten_all()?;
        let bytes = match dtype {
            StoredDType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            StoredDType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        Ok(Self {
            dtype,
            shape: t.dims().to_vec(),
            bytes,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = match self.dtype {
            StoredDType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.clone(), device)?
            }
            StoredDType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.clone(), device)?
            }
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: StoredDType,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    /// Counters, RNG seeds and optimizer scalars.
    pub state: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let expect = t.shape.iter().product::<usize>() * t.dtype.size();
            if expect != t.bytes.len() {
                return Err(Error::Checkpoint(format!("{name}: {} bytes for shape {:?}", t.bytes.len(), t.shape)));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                len: t.bytes.len() as u64,
            });
            offset += t.bytes.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let schema = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if schema != SCHEMA {
            return Err(Error::Checkpoint(format!("schema {schema}, this build reads {SCHEMA}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > data.len() || e.shape.iter().product::<usize>() * e.dtype.size() != e.len as usize {
                return Err(Error::Checkpoint(format!("tensor {} is truncated or malformed", e.name)));
            }
            tensors.insert(
                e.name,
                StoredTensor {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: data[start..end].to_vec(),
                },
            );
        }
        Ok(Self {
            config: header.config,
            state: header.state,
            tensors,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
            .to_tensor(device)
    }
}
