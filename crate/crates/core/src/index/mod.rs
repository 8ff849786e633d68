//! IVF-PQ approximate nearest-neighbour index.
//!
//! Vectors are assigned to the nearest of `nlist` coarse k-means centroids;
//! the residual to that centroid is split into `m` sub-vectors and each is
//! replaced by the id of its nearest codeword (8-bit codes). Search probes
//! the `nprobe` closest lists and ranks candidates by asymmetric distance:
//! the raw query residual against the quantized database residual, looked up
//! from per-subspace distance tables.
//!
//! All distances are squared L2. Over unit-normalized vectors that ranks
//! identically to cosine similarity since `‖a − b‖² = 2 − 2·cos(a, b)`.

mod io;
mod ivf;
mod kmeans;
mod pq;

use thiserror::Error;

use crate::manifest::EmbeddingStore;

pub use io::{deserialize_index, load_index, save_index, serialize_index, INDEX_MAGIC, INDEX_VERSION};
pub use ivf::{
    default_nlist, default_nprobe, encode, search, IndexParams, InvertedList, IvfPqIndex, Neighbor, SearchResult,
};
pub use kmeans::{kmeans, kmeans_flat, KMeansModel, KMeansParams};
pub use pq::{train_pq, PqCodebook, PQ_CODEWORDS};

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("need at least k = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("dimension {dim} is not divisible by m = {m}")]
    NotDivisible { dim: usize, m: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("nprobe must lie in [1, {nlist}], got {nprobe}")]
    BadProbe { nprobe: usize, nlist: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("index file: bad magic")]
    BadMagic,
    #[error("index file: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("index file: truncated at byte {0}")]
    Truncated(usize),
    #[error("index file: {0}")]
    Corrupt(String),
    #[error("index file {path}: {message}")]
    Io { path: String, message: String },
}

/// Returns a copy of `store` with every row scaled to unit L2 norm.
pub fn normalize_rows(store: &EmbeddingStore) -> Result<EmbeddingStore, IndexError> {
    let mut data = Vec::with_capacity(store.as_slice().len());
    for (i, row) in store.iter_rows().enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(IndexError::ZeroNorm(i));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingStore::new(store.dim(), data).expect("normalized rows stay finite"))
}
