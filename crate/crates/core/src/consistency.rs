//! Identity consistency: pairwise cosine similarity of a clip's identity
//! embeddings and the mean off-diagonal retention gate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::EmbeddingStore;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ConsistencyError {
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding (row {0})")]
    ZeroNorm(usize),
    #[error("embedding row {row} out of range for store with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("need at least 2 embeddings, got {0}")]
    TooFew(usize),
}

type Result<T> = std::result::Result<T, ConsistencyError>;

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(ConsistencyError::DimensionMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() {
        return Err(ConsistencyError::ZeroNorm(0));
    }
    if nb == T::zero() {
        return Err(ConsistencyError::ZeroNorm(1));
    }
    Ok(clamp_unit(dot(a, b) / (na * nb)))
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

/// Symmetric `n × n` matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_values(n: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), n * n, "similarity matrix must be n x n");
        Self { n, values }
    }

    /// Computes every pair once and mirrors it, so the result is exactly symmetric.
    pub fn from_vectors<V: AsRef<[T]>>(vectors: &[V]) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            return Err(ConsistencyError::TooFew(n));
        }
        let dim = vectors[0].as_ref().len();
        let mut unit: Vec<Vec<T>> = Vec::with_capacity(n);
        for (i, v) in vectors.iter().enumerate() {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(ConsistencyError::DimensionMismatch(dim, v.len()));
            }
            let norm = dot(v, v).sqrt();
            if norm == T::zero() {
                return Err(ConsistencyError::ZeroNorm(i));
            }
            unit.push(v.iter().map(|&x| x / norm).collect());
        }
        let mut values = vec![T::zero(); n * n];
        for i in 0..n {
            values[i * n + i] = T::one();
            for j in i + 1..n {
                let s = clamp_unit(dot(&unit[i], &unit[j]));
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Similarity matrix over selected rows of a store, accumulated in `f64`.
pub fn similarity_matrix(rows: &[usize], store: &EmbeddingStore) -> Result<SimilarityMatrix<f64>> {
    let vectors = gather_rows(rows, store)?;
    SimilarityMatrix::from_vectors(&vectors).map_err(|e| match e {
        ConsistencyError::ZeroNorm(i) => ConsistencyError::ZeroNorm(rows[i]),
        other => other,
    })
}

fn gather_rows(rows: &[usize], store: &EmbeddingStore) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|&r| {
            store
                .get(r)
                .map(|row| row.iter().map(|&v| f64::from(v)).collect())
                .ok_or(ConsistencyError::RowOutOfRange {
                    row: r,
                    rows: store.rows(),
                })
        })
        .collect()
}

/// Mean of the `n(n-1)` off-diagonal entries.
pub fn mean_off_diagonal<T: Scalar>(m: &SimilarityMatrix<T>) -> Result<T> {
    let n = m.n();
    if n < 2 {
        return Err(ConsistencyError::TooFew(n));
    }
    let mut sum = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum = sum + m.get(i, j);
            }
        }
    }
    Ok(sum / T::of((n * (n - 1)) as f64))
}

/// How the gate compares the mean similarity with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Retain when the mean strictly exceeds the threshold.
    #[default]
    Strict,
    /// Retain when the mean is at least the threshold.
    Inclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold: f64,
    pub boundary: Boundary,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            boundary: Boundary::Strict,
        }
    }
}

impl GateConfig {
    pub fn passes(&self, mean_similarity: f64) -> bool {
        match self.boundary {
            Boundary::Strict => mean_similarity > self.threshold,
            Boundary::Inclusive => mean_similarity >= self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub clip_id: String,
    pub n_embeddings: usize,
    /// `None` when fewer than two embeddings were available.
    pub mean_similarity: Option<f64>,
    pub retained: bool,
    /// Frames that were skipped because they carried no embedding.
    pub skipped_frames: usize,
}

/// Scores a clip from the embedding rows of its sampled single-face frames.
/// Clips with fewer than two embeddings are not retained and carry no mean.
pub fn consistency_gate(
    clip_id: &str,
    rows: &[usize],
    store: &EmbeddingStore,
    cfg: &GateConfig,
) -> Result<ConsistencyReport> {
    if rows.len() < 2 {
        return Ok(ConsistencyReport {
            clip_id: clip_id.to_string(),
            n_embeddings: rows.len(),
            mean_similarity: None,
            retained: false,
            skipped_frames: 0,
        });
    }
    let m = similarity_matrix(rows, store)?;
    let mean = mean_off_diagonal(&m)?;
    Ok(ConsistencyReport {
        clip_id: clip_id.to_string(),
        n_embeddings: rows.len(),
        mean_similarity: Some(mean),
        retained: cfg.passes(mean),
        skipped_frames: 0,
    })
}
