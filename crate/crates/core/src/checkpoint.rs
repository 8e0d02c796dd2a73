//! Tensor container files: model checkpoints and feature matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RKDA" | version: u32 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The header is `{"tensors": [{"name", "shape": [rows, cols], "dtype"}...],
//! "meta": {...}}`. Payloads are the raw tensor values, concatenated in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, Scalar};
use crate::objectives::LossReport;

pub const MAGIC: &[u8; 4] = b"RKDA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated file: need {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_matrix<T: Scalar>(name: impl Into<String>, m: &DenseMatrix<T>) -> Self {
        let data = if T::DTYPE == "f32" {
            TensorData::F32(m.as_slice().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect())
        } else {
            TensorData::F64(m.as_slice().iter().map(|x| x.as_f64()).collect())
        };
        Tensor {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            data,
        }
    }

    /// Converts to a matrix of element type `T`, widening or rounding as
    /// needed.
    pub fn to_matrix<T: Scalar>(&self) -> DenseMatrix<T> {
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        DenseMatrix::from_vec(self.rows, self.cols, values).expect("tensor length checked on construction")
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Value,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: vec![t.rows, t.cols],
                    dtype: t.data.dtype().to_string(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let found = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated { expected: 16, found });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { expected: 16, found });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16u64.saturating_add(header_len);
        if header_end > found {
            return Err(CheckpointError::Truncated { expected: header_end, found });
        }
        let header_bytes = &bytes[16..header_end as usize];
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|e| CheckpointError::BadHeader(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(header_text)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut expected = header_end;
        let mut layouts = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let [rows, cols] = t.shape[..] else {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "tensor {} has rank {}, expected 2",
                    t.name,
                    t.shape.len()
                )));
            };
            let width = match t.dtype.as_str() {
                "f32" => 4u64,
                "f64" => 8u64,
                other => {
                    return Err(CheckpointError::BadHeader(format!(
                        "unknown dtype {other:?} for tensor {}",
                        t.name
                    )))
                }
            };
            let count = (rows as u64)
                .checked_mul(cols as u64)
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| CheckpointError::ShapeMismatch(format!("tensor {} is too large", t.name)))?;
            layouts.push((expected, rows, cols, width));
            expected = expected.saturating_add(count);
        }
        if expected > found {
            return Err(CheckpointError::Truncated { expected, found });
        }
        if expected < found {
            return Err(CheckpointError::ShapeMismatch(format!(
                "header shapes account for {expected} bytes but file has {found}"
            )));
        }

        let tensors = header
            .tensors
            .into_iter()
            .zip(layouts)
            .map(|(t, (start, rows, cols, width))| {
                let start = start as usize;
                let end = start + rows * cols * width as usize;
                let raw = &bytes[start..end];
                let data = if width == 4 {
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                } else {
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                };
                Tensor {
                    name: t.name,
                    rows,
                    cols,
                    data,
                }
            })
            .collect();
        Ok(TensorFile {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Which objective produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

/// Trained parameters plus the configuration and last loss report.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<Tensor>,
    pub config: serde_json::Value,
    pub report: Option<LossReport>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        TensorFile {
            tensors: self.tensors.clone(),
            meta: serde_json::json!({
                "kind": self.kind,
                "config": self.config,
                "report": self.report,
            }),
        }
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self, CheckpointError> {
        let kind = file
            .meta
            .get("kind")
            .cloned()
            .ok_or_else(|| CheckpointError::BadHeader("missing meta.kind".into()))
            .and_then(|k| {
                serde_json::from_value(k).map_err(|e| CheckpointError::BadHeader(format!("meta.kind: {e}")))
            })?;
        let report = match file.meta.get("report") {
            None | Some(serde_json::Value::Null) => None,
            Some(r) => Some(
                serde_json::from_value(r.clone())
                    .map_err(|e| CheckpointError::BadHeader(format!("meta.report: {e}")))?,
            ),
        };
        let ckpt = Checkpoint {
            kind,
            tensors: file.tensors,
            config: file.meta.get("config").cloned().unwrap_or(serde_json::Value::Null),
            report,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks that the tensors form a well-typed highway encoder (and a
    /// relation table for teachers).
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let shape_err = |msg: String| Err(CheckpointError::ShapeMismatch(msg));
        let Some(features) = self.tensor("features") else {
            return shape_err("missing tensor `features`".into());
        };
        let dim = features.cols;
        let mut layer = 0;
        while let Some(w) = self.tensor(&format!("layer{layer}.weight")) {
            let wt = self.tensor(&format!("layer{layer}.gate_weight"));
            let bt = self.tensor(&format!("layer{layer}.gate_bias"));
            let (Some(wt), Some(bt)) = (wt, bt) else {
                return shape_err(format!("layer {layer} is missing gate tensors"));
            };
            if (w.rows, w.cols) != (dim, dim) || (wt.rows, wt.cols) != (dim, dim) || (bt.rows, bt.cols) != (1, dim) {
                return shape_err(format!(
                    "layer {layer}: weight {}x{}, gate {}x{}, bias {}x{} do not match width {dim}",
                    w.rows, w.cols, wt.rows, wt.cols, bt.rows, bt.cols
                ));
            }
            layer += 1;
        }
        if layer == 0 {
            return shape_err("checkpoint has no encoder layers".into());
        }
        if self.kind == ModelKind::Teacher {
            match self.tensor("relation") {
                Some(r) if r.cols == dim => {}
                Some(r) => return shape_err(format!("relation table width {} != {dim}", r.cols)),
                None => return shape_err("teacher checkpoint lacks `relation`".into()),
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        (0..).take_while(|l| self.tensor(&format!("layer{l}.weight")).is_some()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::load(path)?;
        Checkpoint::from_tensor_file(file).map_err(Error::from)
    }
}

/// Writes a path-level checkpoint; thin wrapper over [`Checkpoint::save`].
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
