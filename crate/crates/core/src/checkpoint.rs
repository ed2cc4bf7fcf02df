//! Binary container for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SLUCKPT\0"
//! version  u32
//! hdr_len  u64
//! header   hdr_len bytes of UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "rows", "cols"}]}
//! data     f64 little-endian values of every tensor, row-major, in header order
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Params};

const MAGIC: &[u8; 8] = b"SLUCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    /// Adds every parameter of `params` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &dyn Params) {
        params.visit(prefix, &mut |name, p| self.tensors.push((name.to_string(), p.value.clone())));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `params` from the tensor of the same
    /// name; shapes must match exactly.
    pub fn fill_params(&self, prefix: &str, params: &mut dyn Params) -> Result<()> {
        let mut failure = None;
        params.visit_mut(prefix, &mut |name, p: &mut Param| {
            if failure.is_some() {
                return;
            }
            match self.get(name) {
                Some(t) if t.dim() == p.value.dim() => p.value.assign(t),
                Some(t) => {
                    failure = Some(format!("tensor `{name}` has shape {:?}, expected {:?}", t.dim(), p.value.dim()))
                }
                None => failure = Some(format!("tensor `{name}` missing")),
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hdr_end = 20usize
            .checked_add(hdr_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hdr_end])?;
        let mut offset = hdr_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(corrupt("truncated tensor data"));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            let t = Array2::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }
}
