//! Feature galleries and their on-disk format.
//!
//! A gallery file is little-endian throughout:
//!
//! ```text
//! magic   b"CRFG"
//! version u32 = 1
//! dim     u32
//! count   u64
//! count × { label u32, dim × f32 }
//! ```
//!
//! Files are written once with `create_new` and never rewritten; a stored
//! gallery is only ever read back.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"CRFG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGallery {
    pub model_id: String,
    dim: usize,
    labels: Vec<u32>,
    features: Vec<f32>,
}

impl FeatureGallery {
    pub fn new(model_id: impl Into<String>, dim: usize, labels: Vec<u32>, features: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("gallery dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(FeatureGallery {
            model_id: model_id.into(),
            dim,
            labels,
            features,
        })
    }

    /// Stores `features` (one row per label) at f32 precision.
    pub fn from_matrix(model_id: impl Into<String>, features: &Matrix, labels: &[u32]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid("feature rows and labels differ in length"));
        }
        FeatureGallery::new(
            model_id,
            features.cols(),
            labels.to_vec(),
            features.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    /// Raw inputs of a labeled set, for exporting datasets.
    pub fn from_labeled_set(model_id: impl Into<String>, set: &LabeledSet) -> Result<Self> {
        FeatureGallery::from_matrix(model_id, set.samples(), set.labels())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.features.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn to_labeled_set(&self) -> Result<LabeledSet> {
        LabeledSet::new(self.to_matrix(), self.labels.clone())
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureGallery {
        let mut labels = Vec::with_capacity(idx.len());
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            labels.push(self.labels[i]);
            features.extend_from_slice(self.row(i));
        }
        FeatureGallery {
            model_id: self.model_id.clone(),
            dim: self.dim,
            labels,
            features,
        }
    }

    /// Applies `f` to every feature row (used for sign flips and scalings in tests).
    pub fn map_rows(&self, mut f: impl FnMut(&mut [f32])) -> FeatureGallery {
        let mut g = self.clone();
        for row in g.features.chunks_mut(self.dim) {
            f(row);
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], model_id: impl Into<String>, origin: &str) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Format {
            path: origin.to_string(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if dim == 0 {
            return Err(err(8, "dimension is zero".into()));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let record = 4 + 4 * dim as u64;
        let expected = (HEADER_LEN as u64)
            .checked_add(count.checked_mul(record).ok_or_else(|| err(12, "count overflows".into()))?)
            .ok_or_else(|| err(12, "count overflows".into()))?;
        if (bytes.len() as u64) < expected {
            return Err(err(
                bytes.len(),
                format!("truncated: {count} records of dimension {dim} need {expected} bytes"),
            ));
        }
        if (bytes.len() as u64) > expected {
            return Err(err(expected as usize, "trailing bytes after last record".into()));
        }
        let count = count as usize;
        let mut labels = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * dim);
        let mut pos = HEADER_LEN;
        for _ in 0..count {
            labels.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")));
            pos += 4;
            for _ in 0..dim {
                features.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")));
                pos += 4;
            }
        }
        FeatureGallery::new(model_id, dim, labels, features)
    }

    /// Writes the gallery to a new file; fails if the file already exists.
    /// Returns the SHA-256 of the bytes written.
    pub fn write_new(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path, model_id: impl Into<String>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        FeatureGallery::from_bytes(&bytes, model_id, &path.display().to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a file only if its SHA-256 matches `expected`.
pub fn read_verified(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(bytes)
}
