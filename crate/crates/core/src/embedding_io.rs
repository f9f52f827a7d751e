//! Text-embedding matrices and the DSEM file format.
//!
//! DSEM layout (all little-endian):
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `DSEM`                  |
//! | 4..8   | version `u32` = 1             |
//! | 8..12  | K (rows) `u32`                |
//! | 12..16 | D (dims) `u32`                |
//! | 16     | dtype code `u8` (0 = f32)     |
//! | 17..20 | reserved, zero                |
//! | 20..   | K·D `f32`, row-major          |
//!
//! Labels live in an optional sibling `<stem>.labels.json` holding a single
//! array of K strings.

use std::path::{Path, PathBuf};

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

pub const DSEM_MAGIC: &[u8; 4] = b"DSEM";
pub const DSEM_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 20;

/// K×D text embeddings with optional labels. All values are finite and K, D ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Matrix<f32>,
    labels: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(data: Matrix<f32>, labels: Option<Vec<String>>) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::EmptyMatrix {
                rows: data.rows(),
                dims: data.cols(),
            });
        }
        codec::check_finite(data.as_slice(), "embedding matrix")?;
        if let Some(l) = &labels {
            if l.len() != data.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} embedding rows",
                    l.len(),
                    data.rows()
                )));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, None)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} embedding rows",
                labels.len(),
                self.rows()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Labels if present, otherwise `class_<i>` placeholders.
    pub fn labels_or_default(&self) -> Vec<String> {
        match &self.labels {
            Some(l) => l.clone(),
            None => (0..self.rows()).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.as_slice().len() * 4);
        out.extend_from_slice(DSEM_MAGIC);
        codec::put_u32(&mut out, DSEM_VERSION);
        codec::put_u32(&mut out, self.rows() as u32);
        codec::put_u32(&mut out, self.dims() as u32);
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0, 0, 0]);
        codec::put_f32s(&mut out, self.data.as_slice());
        out
    }

    /// Parses a DSEM payload. Labels are not part of the binary and come back as `None`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DSEM_MAGIC)?;
        let version = r.u32()?;
        if version != DSEM_VERSION {
            return Err(Error::Format(format!("unsupported DSEM version {version}")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let reserved = r.take(3)?;
        if reserved != [0, 0, 0] {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        if k == 0 || d == 0 {
            return Err(Error::EmptyMatrix { rows: k, dims: d });
        }
        let n = k
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("K·D overflows: {k}x{d}")))?;
        let data = r.f32s(n)?;
        r.expect_end()?;
        Self::new(Matrix::from_vec(k, d, data)?, None)
    }
}

/// `foo/bar.dsem` → `foo/bar.labels.json`.
pub fn labels_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.json"))
}

/// Reads a DSEM file plus its sibling labels document when one exists.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let m = EmbeddingMatrix::from_bytes(&codec::read_file(path)?)?;
    let lpath = labels_path(path);
    if lpath.exists() {
        let raw = codec::read_file(&lpath)?;
        let labels: Vec<String> = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", lpath.display())))?;
        return m.with_labels(labels);
    }
    Ok(m)
}

/// Writes the DSEM binary, and the labels sibling when the matrix carries labels.
pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    codec::write_file(path, &m.to_bytes())?;
    if let Some(labels) = m.labels() {
        let doc = serde_json::to_vec(labels).map_err(|e| Error::Format(e.to_string()))?;
        codec::write_file(&labels_path(path), &doc)?;
    }
    Ok(())
}

/// Scales every row to unit Euclidean norm. Rows with norm ≤ 1e-12 are rejected.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.data.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if n <= 1e-12 {
            return Err(Error::DegenerateRow { row: i });
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / n) as f32;
        }
    }
    EmbeddingMatrix::new(out, m.labels.clone())
}

/// Row norms computed in `f64`.
pub fn row_norms(m: &EmbeddingMatrix) -> Vec<f64> {
    m.data
        .iter_rows()
        .map(|r| norm(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect()
}
