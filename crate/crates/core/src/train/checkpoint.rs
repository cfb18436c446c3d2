//! Binary checkpoint format.
//!
//! ```text
//! "PDNRT50\0"  u32 version  u32 tensor count
//! per tensor:  u16 name length, name, u8 dtype, u8 ndim, ndim x u64 dims, data
//! u32 metadata length, metadata JSON
//! u32 CRC-32 of everything above
//! ```
//! All integers and elements are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Architecture, ModelError, ModelGraph, RngState};
use crate::optim::{LrController, OptimizerState, Rule};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"PDNRT50\0";
pub const VERSION: u32 = 1;
const OPT_M: &str = "optim.m/";
const OPT_V: &str = "optim.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    IoFailure {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,
    #[error("checkpoint does not fit the model: {0}")]
    ShapeMismatchOnLoad(String),
    #[error("checkpoint holds {found} tensors, expected {expected}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    #[serde(flatten)]
    pub rule: Rule,
    pub base_lr: f64,
    pub current_lr: f64,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub architecture: Architecture,
    pub dtype: DType,
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub best_val_acc: Option<f64>,
    pub optimizer: Option<OptimizerMeta>,
    pub lr_controller: Option<LrController>,
    pub rng: RngState,
    pub class_names: Vec<String>,
    /// Names of trainable parameters at save time.
    pub trainable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub model: ModelGraph<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub lr_controller: Option<LrController>,
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub best_val_acc: Option<f64>,
    pub class_names: Vec<String>,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(model: ModelGraph<T>, class_names: Vec<String>) -> Self {
        Self {
            model,
            optimizer: None,
            lr_controller: None,
            epoch: 0,
            best_val_loss: None,
            best_val_acc: None,
            class_names,
        }
    }

    fn metadata(&self) -> Metadata {
        Metadata {
            architecture: self.model.architecture().clone(),
            dtype: T::DTYPE,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            best_val_acc: self.best_val_acc,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                rule: o.rule,
                base_lr: o.base_lr,
                current_lr: o.current_lr,
                step_count: o.step_count,
            }),
            lr_controller: self.lr_controller.clone(),
            rng: self.model.rng_state(),
            class_names: self.class_names.clone(),
            trainable: self
                .model
                .params()
                .iter()
                .filter(|p| p.trainable)
                .map(|p| p.name.clone())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = self.model.named_tensors();
        if let Some(o) = &self.optimizer {
            tensors.extend(o.m.iter().map(|(n, t)| (format!("{OPT_M}{n}"), t.clone())));
            tensors.extend(o.v.iter().map(|(n, t)| (format!("{OPT_V}{n}"), t.clone())));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let meta = serde_json::to_vec(&self.metadata()).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint. Validation order: magic, checksum, version, body.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = parse(bytes)?;
        if meta.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                expected: T::DTYPE,
                found: meta.dtype,
            });
        }
        let mut model = ModelGraph::<T>::from_architecture(&meta.architecture)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            let t = t.into_tensor::<T>()?;
            if let Some(n) = name.strip_prefix(OPT_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPT_V) {
                v.insert(n.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        model.load_named(params).map_err(shape_error)?;
        let trainable: std::collections::BTreeSet<&String> = meta.trainable.iter().collect();
        model.visit_params_mut(&mut |p| p.trainable = trainable.contains(&p.name));
        model.set_rng_state(meta.rng);
        let optimizer = meta.optimizer.map(|o| OptimizerState {
            rule: o.rule,
            base_lr: o.base_lr,
            current_lr: o.current_lr,
            step_count: o.step_count,
            m,
            v,
        });
        Ok(Self {
            model,
            optimizer,
            lr_controller: meta.lr_controller,
            epoch: meta.epoch,
            best_val_loss: meta.best_val_loss,
            best_val_acc: meta.best_val_acc,
            class_names: meta.class_names,
        })
    }
}

fn shape_error(e: ModelError) -> CheckpointError {
    CheckpointError::ShapeMismatchOnLoad(e.to_string())
}

/// Tensor as stored on disk, before conversion to an element type.
struct RawTensor {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl RawTensor {
    fn into_tensor<T: Element>(self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                expected: T::DTYPE,
                found: self.dtype,
            });
        }
        let data = self.bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(data, &self.shape).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<(Metadata, Vec<(String, RawTensor)>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 4 + 4 + 4 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut c = Cursor {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = c.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype code {code}")))?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let bytes = c.take(n)?.to_vec();
        tensors.push((name, RawTensor { dtype, shape, bytes }));
    }
    let meta_len = c.u32()? as usize;
    let meta: Metadata = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes after metadata".into()));
    }
    Ok((meta, tensors))
}

pub fn save_checkpoint<T: Element>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("partial");
    fs::write(&tmp, ckpt.to_bytes()).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CheckpointError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&read(path)?)
}

/// Metadata only, after full validation of the file.
pub fn read_metadata(path: &Path) -> Result<Metadata> {
    Ok(parse(&read(path)?)?.0)
}

/// Loads parameters and buffers into an existing model, which must have the
/// same parameter names and shapes. The model is unchanged on error.
pub fn load_into<T: Element>(model: &mut ModelGraph<T>, path: &Path) -> Result<Metadata> {
    let (meta, tensors) = parse(&read(path)?)?;
    let mut params = BTreeMap::new();
    for (name, t) in tensors {
        if !(name.starts_with(OPT_M) || name.starts_with(OPT_V)) {
            params.insert(name, t.into_tensor::<T>()?);
        }
    }
    model.load_named(params).map_err(shape_error)?;
    Ok(meta)
}
