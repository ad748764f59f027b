//! Id-keyed embedding vectors, the `EMB1` file format, and cosine similarity.
//!
//! `EMB1` is little-endian: the magic bytes `EMB1`, a `u32` record count, a
//! `u32` dimension, then per record a `u16` id byte length, the UTF-8 id, and
//! `dim` IEEE-754 `f32` values. Records are written in lexicographic id order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{self, Scalar};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad magic bytes {found:?}, expected \"EMB1\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated file: expected at least {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in vector {id:?} at component {component}")]
    NonFiniteValue { id: String, component: usize },
    #[error("vector {id:?} has length {actual}, expected {expected}")]
    WrongLength {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("id {0:?} is not valid UTF-8 or longer than 65535 bytes")]
    BadId(String),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum VectorError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Lookup of embedding vectors by id.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    /// Vector for `id`, widened to 64-bit.
    fn lookup(&self, id: &str) -> Option<Vec<f64>>;
}

/// Fixed-dimension vectors keyed by id, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a vector, rejecting duplicate ids, wrong lengths and non-finite values.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::WrongLength {
                id,
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbeddingError::BadId(id));
        }
        if let Some(component) = vector.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteValue { id, component });
        }
        if self.entries.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    /// Inserts a 64-bit vector, narrowing it to storage precision.
    pub fn insert_f64(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<(), EmbeddingError> {
        self.insert(id, vector.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    /// Vector for `id` converted to the requested scalar type.
    pub fn vector<T: Scalar>(&self, id: &str) -> Option<Vec<T>> {
        self.get(id).map(scalar::convert_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self
            .entries
            .keys()
            .map(|id| 2 + id.len() + 4 * self.dim)
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + body);
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, vector) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut reader = ByteReader::new(bytes);
        let magic = reader.take(4)?;
        if magic != EMB1_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(EmbeddingError::BadMagic { found });
        }
        let count = reader.u32()? as usize;
        let dim = reader.u32()? as usize;
        let mut matrix = Self::new(dim)?;
        for _ in 0..count {
            let id_len = reader.u16()? as usize;
            let id_bytes = reader.take(id_len)?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| EmbeddingError::BadId(String::from_utf8_lossy(id_bytes).into_owned()))?
                .to_owned();
            let raw = reader.take(4 * dim)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            matrix.insert(id, vector)?;
        }
        if reader.remaining() > 0 {
            return Err(EmbeddingError::TrailingBytes(reader.remaining()));
        }
        Ok(matrix)
    }
}

impl EmbeddingProvider for EmbeddingMatrix {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, id: &str) -> Option<Vec<f64>> {
        self.vector(id)
    }
}

pub fn load_emb(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    EmbeddingMatrix::from_bytes(&fs::read(path)?)
}

pub fn save_emb(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    fs::write(path, matrix.to_bytes())?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(EmbeddingError::TruncatedFile {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, EmbeddingError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, EmbeddingError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T, VectorError> {
    if u.len() != v.len() {
        return Err(VectorError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let nu2 = scalar::dot(u, u);
    let nv2 = scalar::dot(v, v);
    if nu2 == T::zero() || nv2 == T::zero() {
        return Err(VectorError::ZeroVector);
    }
    // sqrt(x·x) == |x| exactly, so identical inputs give exactly 1.
    let mut denom = (nu2 * nv2).sqrt();
    if !denom.is_finite() || denom == T::zero() {
        denom = nu2.sqrt() * nv2.sqrt();
    }
    let c = scalar::dot(u, v) / denom;
    Ok(c.max(-T::one()).min(T::one()))
}
