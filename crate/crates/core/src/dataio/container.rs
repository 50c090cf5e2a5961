//! Little-endian binary containers.
//!
//! Dataset file:
//!
//! ```text
//! b"SSCNDATA"                      8 bytes
//! rows, cols                       u64 each
//! entries                          rows*cols f64, column-major
//! label_count                      u64 (0 when unlabeled, else cols)
//! labels                           label_count u64
//! json_len                         u64
//! json                             UTF-8 metadata (e.g. the generating SubspaceSpec)
//! ```
//!
//! Tensor file (checkpoints):
//!
//! ```text
//! b"SSCNTENS"                      8 bytes
//! tensor_count                     u64
//! per tensor: name_len u64, name UTF-8, rows u64, cols u64, rows*cols f64 column-major
//! json_len                         u64
//! json                             UTF-8 metadata
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataMatrix;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const DATA_MAGIC: &[u8; 8] = b"SSCNDATA";
const TENSOR_MAGIC: &[u8; 8] = b"SSCNTENS";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(format!("truncated: need {n} more bytes")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("length {v} does not fit in memory")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err("matrix dimensions overflow"))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| self.err("overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn json(&mut self) -> Result<serde_json::Value> {
        let len = self.len()?;
        let raw = self.take(len)?;
        let text = std::str::from_utf8(raw).map_err(|e| self.err(format!("metadata is not UTF-8: {e}")))?;
        if text.is_empty() {
            return Ok(serde_json::Value::Null);
        }
        Ok(serde_json::from_str(text)?)
    }
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_json(out: &mut Vec<u8>, meta: &serde_json::Value) -> Result<()> {
    let text = if meta.is_null() {
        String::new()
    } else {
        serde_json::to_string(meta)?
    };
    push_u64(out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

pub fn write_dataset(path: &Path, data: &DataMatrix, metadata: &serde_json::Value) -> Result<()> {
    let x = data.x();
    let mut out = Vec::with_capacity(32 + x.len() * 8);
    out.extend_from_slice(DATA_MAGIC);
    push_u64(&mut out, x.nrows() as u64);
    push_u64(&mut out, x.ncols() as u64);
    push_matrix(&mut out, x);
    match data.labels() {
        Some(labels) => {
            push_u64(&mut out, labels.len() as u64);
            for &l in labels {
                push_u64(&mut out, l as u64);
            }
        }
        None => push_u64(&mut out, 0),
    }
    push_json(&mut out, metadata)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DataMatrix, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != DATA_MAGIC {
        r.pos = 0;
        return Err(r.err("not a dataset container (bad magic)"));
    }
    let rows = r.len()?;
    let cols = r.len()?;
    let x = r.matrix(rows, cols)?;
    let label_count = r.len()?;
    let labels = if label_count == 0 {
        None
    } else {
        if label_count != cols {
            return Err(r.err(format!(
                "label count {label_count} does not match column count {cols}"
            )));
        }
        Some(
            (0..label_count)
                .map(|_| r.len())
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let meta = r.json()?;
    Ok((DataMatrix::new(x, labels)?, meta))
}

/// Named matrices plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, Matrix)>,
    pub metadata: serde_json::Value,
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Domain(format!("checkpoint is missing tensor `{name}`")))
    }
}

pub fn write_tensors(path: &Path, file: &TensorFile) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    push_u64(&mut out, file.tensors.len() as u64);
    for (name, m) in &file.tensors {
        push_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, m.nrows() as u64);
        push_u64(&mut out, m.ncols() as u64);
        push_matrix(&mut out, m);
    }
    push_json(&mut out, &file.metadata)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != TENSOR_MAGIC {
        r.pos = 0;
        return Err(r.err("not a tensor container (bad magic)"));
    }
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| r.err(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rows = r.len()?;
        let cols = r.len()?;
        tensors.push((name, r.matrix(rows, cols)?));
    }
    let metadata = r.json()?;
    Ok(TensorFile { tensors, metadata })
}

/// Short content hash of a data matrix (dims and entries).
pub fn data_fingerprint(x: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
