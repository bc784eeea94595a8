//! Labeled embedding matrices and the cosine similarity primitive.
//!
//! Every text and visual feature that flows through the engine lives in an
//! [`EmbeddingMatrix`]: a row-major block of `count x dim` reals with one
//! unique UTF-8 label per row. Values are held in 64-bit precision in memory
//! and stored as 32-bit floats on disk (see [`io`]).

pub(crate) mod io;

use std::collections::HashMap;
use std::path::PathBuf;

use thiserror::Error;

pub use io::{load_embeddings, save_embeddings, EmbeddingFormat, BINARY_MAGIC, BINARY_VERSION};

/// Tolerance on the row norm when a matrix claims to be normalized.
pub const NORMALIZED_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector at row {row}")]
    ZeroVector { row: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("row {row} has norm {norm} but the matrix is flagged normalized")]
    NotNormalized { row: usize, norm: f64 },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EmbeddingError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MalformedHeader(_) => "MalformedHeader",
            Self::DimensionMismatch { .. } => "DimensionMismatch",
            Self::ZeroVector { .. } => "ZeroVector",
            Self::DuplicateLabel(_) => "DuplicateLabel",
            Self::NonFiniteValue { .. } => "NonFiniteValue",
            Self::NotNormalized { .. } => "NotNormalized",
            Self::IoFailure { .. } => "IoFailure",
        }
    }
}

/// A validated, immutable, labeled `count x dim` matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    labels: Vec<String>,
    data: Vec<f64>,
    norms: Vec<f64>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major `data`, enforcing every invariant:
    /// finite entries, no zero rows, unique labels, truthful normalized flag.
    pub fn new(
        dim: usize,
        labels: Vec<String>,
        data: Vec<f64>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::MalformedHeader("dim must be positive".into()));
        }
        if data.len() != labels.len() * dim {
            return Err(EmbeddingError::MalformedHeader(format!(
                "{} labels but {} values for dim {}",
                labels.len(),
                data.len(),
                dim
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (row, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), row).is_some() {
                return Err(EmbeddingError::DuplicateLabel(label.clone()));
            }
        }
        let mut norms = Vec::with_capacity(labels.len());
        for (row, values) in data.chunks_exact(dim).enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFiniteValue { row, col });
            }
            let norm = l2_norm(values);
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroVector { row });
            }
            if normalized && (norm - 1.0).abs() > NORMALIZED_TOLERANCE {
                return Err(EmbeddingError::NotNormalized { row, norm });
            }
            norms.push(norm);
        }
        Ok(Self {
            dim,
            labels,
            data,
            norms,
            normalized,
            index,
        })
    }

    /// Builds a matrix from individual rows; every row must have length `dim`.
    pub fn from_rows(
        dim: usize,
        labels: Vec<String>,
        rows: Vec<Vec<f64>>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if labels.len() != rows.len() {
            return Err(EmbeddingError::MalformedHeader(format!(
                "{} labels but {} rows",
                labels.len(),
                rows.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend(row);
        }
        Self::new(dim, labels, data, normalized)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, row: usize) -> &str {
        &self.labels[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// L2 norm of a row, computed once at construction.
    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Row index of `label`, if present.
    pub fn find(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Returns a copy with every row scaled to unit length.
    pub fn normalized(&self) -> Self {
        let mut data = self.data.clone();
        for (values, norm) in data.chunks_exact_mut(self.dim).zip(&self.norms) {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(self.dim, self.labels.clone(), data, true)
            .expect("rescaling a valid matrix keeps it valid")
    }

    /// Cosine between row `row` and an arbitrary vector with known norm.
    pub(crate) fn cosine_with(&self, row: usize, v: &[f64], v_norm: f64) -> f64 {
        clamp_unit(dot(self.row(row), v) / (self.norms[row] * v_norm))
    }
}

/// Dense `rows x cols` score table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "score tensor shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(cols: usize, rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "score tensor row width");
            data.extend(row);
        }
        Self::new(n, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self::new(self.cols, self.rows, data)
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Cosine similarity `a.b / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 {
        return Err(EmbeddingError::ZeroVector { row: 0 });
    }
    if nb == 0.0 {
        return Err(EmbeddingError::ZeroVector { row: 1 });
    }
    Ok(clamp_unit(dot(a, b) / (na * nb)))
}

/// Entry `(i, j)` is the cosine between `rows[i]` and `cols[j]`.
pub fn similarity_matrix(
    rows: &EmbeddingMatrix,
    cols: &EmbeddingMatrix,
) -> Result<ScoreTensor, EmbeddingError> {
    if rows.dim() != cols.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: rows.dim(),
            found: cols.dim(),
        });
    }
    let mut data = Vec::with_capacity(rows.count() * cols.count());
    for (i, r) in rows.rows().enumerate() {
        let nr = rows.norm(i);
        for j in 0..cols.count() {
            data.push(cols.cosine_with(j, r, nr));
        }
    }
    Ok(ScoreTensor::new(rows.count(), cols.count(), data))
}
