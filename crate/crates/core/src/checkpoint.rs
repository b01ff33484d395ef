//! `.icpt` named-tensor checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"ICPT"
//! offset 4   format version, u32
//! offset 8   header length in bytes, u64
//! offset 16  header: UTF-8 JSON (see `Header`)
//! ...        zero padding up to the next multiple of 64
//! data       tensor blobs; each blob starts at a 64-byte aligned file
//!            offset, `data_start + entry.offset`, and holds
//!            `product(shape) * dtype_size` raw little-endian bytes
//! ```
//!
//! The header lists each tensor as `{name, dtype, shape, partition, offset,
//! nbytes}` plus a string `attributes` map for run metadata. Tensors are
//! written in name order, so identical archives produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{ParamStore, Partition};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"ICPT";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint has no entries")]
    NoEntries,
    #[error("tensor `{0}` has a zero-sized dimension")]
    ZeroDimShape(String),
    #[error("tensor `{name}`: {nbytes} bytes do not match dtype {dtype} and shape {shape:?}")]
    SizeMismatch { name: String, dtype: &'static str, shape: Vec<usize>, nbytes: usize },
    #[error("partition tags do not cover entries exactly (offending name `{0}`)")]
    PartitionMismatch(String),
    #[error("bad magic bytes, not an ICPT checkpoint")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint: need {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("header parse error: {0}")]
    Header(String),
    #[error("unknown partition tag `{0}`")]
    UnknownPartition(String),
    #[error("unknown dtype tag `{0}`")]
    UnknownDType(String),
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}` is stored as {found}, expected {expected}")]
    DTypeMismatch { name: String, expected: &'static str, found: &'static str },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Self {
        let mut bytes = Vec::new();
        F::write_le(&t.data, &mut bytes);
        Entry { dtype: F::DTYPE, shape: t.shape.clone(), bytes }
    }

    pub fn to_tensor<F: Float>(&self, name: &str) -> Result<Tensor<F>, CheckpointError> {
        if self.dtype != F::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name: name.to_string(),
                expected: F::DTYPE.as_str(),
                found: self.dtype.as_str(),
            });
        }
        Ok(Tensor::new(self.shape.clone(), F::read_le(&self.bytes)))
    }

    pub fn checksum(&self) -> String {
        let d = Sha256::digest(&self.bytes);
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointArchive {
    pub version: u32,
    pub entries: BTreeMap<String, Entry>,
    pub partitions: BTreeMap<String, Partition>,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    partition: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    attributes: BTreeMap<String, String>,
    tensors: Vec<HeaderEntry>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

impl CheckpointArchive {
    pub fn new() -> Self {
        CheckpointArchive { version: FORMAT_VERSION, ..Default::default() }
    }

    pub fn insert<F: Float>(&mut self, name: impl Into<String>, t: &Tensor<F>, partition: Partition) {
        let name = name.into();
        self.entries.insert(name.clone(), Entry::from_tensor(t));
        self.partitions.insert(name, partition);
    }

    /// All parameters of a store, tagged with their partitions.
    pub fn from_store<F: Float>(store: &ParamStore<F>) -> Self {
        let mut a = Self::new();
        for (_, p) in store.iter() {
            a.insert(p.name.clone(), &p.tensor, p.partition);
        }
        a
    }

    /// Copies every store parameter from the archive. Fails if a parameter is
    /// missing, mis-shaped, or carries a different partition tag.
    pub fn load_into<F: Float>(&self, store: &mut ParamStore<F>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let entry = self.entries.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = store.tensor(id).shape.clone();
            if entry.shape != expected {
                return Err(CheckpointError::ShapeMismatch { name, expected, found: entry.shape.clone() });
            }
            if self.partitions.get(&name) != Some(&store.get(id).partition) {
                return Err(CheckpointError::PartitionMismatch(name));
            }
            let t = entry.to_tensor::<F>(&name)?;
            store.tensor_mut(id).data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn tensor<F: Float>(&self, name: &str) -> Result<Tensor<F>, CheckpointError> {
        self.entries.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?.to_tensor(name)
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.entries.is_empty() {
            return Err(CheckpointError::NoEntries);
        }
        for (name, e) in &self.entries {
            if e.shape.contains(&0) {
                return Err(CheckpointError::ZeroDimShape(name.clone()));
            }
            let want = e.shape.iter().product::<usize>() * e.dtype.size_in_bytes();
            if want != e.bytes.len() {
                return Err(CheckpointError::SizeMismatch {
                    name: name.clone(),
                    dtype: e.dtype.as_str(),
                    shape: e.shape.clone(),
                    nbytes: e.bytes.len(),
                });
            }
            if !self.partitions.contains_key(name) {
                return Err(CheckpointError::PartitionMismatch(name.clone()));
            }
        }
        if let Some(extra) = self.partitions.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(CheckpointError::PartitionMismatch(extra.clone()));
        }
        Ok(())
    }

    pub fn names_in(&self, partition: Partition) -> Vec<&str> {
        self.partitions.iter().filter(|(_, p)| **p == partition).map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.validate()?;
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0usize;
        for (name, e) in &self.entries {
            tensors.push(HeaderEntry {
                name: name.clone(),
                dtype: e.dtype.as_str().to_string(),
                shape: e.shape.clone(),
                partition: self.partitions[name].as_str().to_string(),
                offset,
                nbytes: e.bytes.len(),
            });
            offset = align_up(offset + e.bytes.len());
        }
        let header = Header { format_version: FORMAT_VERSION, attributes: self.attributes.clone(), tensors };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let data_start = align_up(PREAMBLE + header_bytes.len());
        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.resize(data_start, 0);
        for e in self.entries.values() {
            out.extend_from_slice(&e.bytes);
            let padded = align_up(out.len() - data_start) + data_start;
            out.resize(padded, 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |offset: usize, needed: usize| -> Result<(), CheckpointError> {
            if offset.checked_add(needed).is_none_or(|end| end > bytes.len()) {
                Err(CheckpointError::Truncated { offset, needed, len: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(0, PREAMBLE)?;
        if &bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
        need(PREAMBLE, header_len)?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + header_len])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(CheckpointError::Header(format!(
                "header declares version {} but preamble says {version}",
                header.format_version
            )));
        }
        let data_start = align_up(PREAMBLE + header_len);
        let mut archive = CheckpointArchive { version, attributes: header.attributes, ..Default::default() };
        for t in header.tensors {
            let dtype = match t.dtype.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(CheckpointError::UnknownDType(other.to_string())),
            };
            let partition = Partition::parse(&t.partition).ok_or(CheckpointError::UnknownPartition(t.partition.clone()))?;
            if t.offset % ALIGN != 0 {
                return Err(CheckpointError::Header(format!("tensor `{}` offset {} is not aligned", t.name, t.offset)));
            }
            let start = data_start + t.offset;
            need(start, t.nbytes)?;
            archive.entries.insert(
                t.name.clone(),
                Entry { dtype, shape: t.shape, bytes: bytes[start..start + t.nbytes].to_vec() },
            );
            if archive.partitions.insert(t.name.clone(), partition).is_some() {
                return Err(CheckpointError::Header(format!("duplicate tensor `{}`", t.name)));
            }
        }
        archive.validate()?;
        Ok(archive)
    }
}

pub fn save_checkpoint(archive: &CheckpointArchive, path: &Path) -> Result<(), CheckpointError> {
    let bytes = archive.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointArchive, CheckpointError> {
    let bytes = std::fs::read(path)?;
    CheckpointArchive::from_bytes(&bytes)
}
