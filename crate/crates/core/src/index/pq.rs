//! Product quantization of coarse residuals.

use tracing::info;

use super::kmeans::{kmeans_flat, nearest, KMeansModel, KMeansParams};
use super::IndexError;
use crate::manifest::EmbeddingStore;

/// Codewords per subspace; codes fit in one byte.
pub const PQ_CODEWORDS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub m: usize,
    pub sub_dim: usize,
    /// Codewords per subspace; 256 unless the training set was smaller.
    pub k_pq: usize,
    /// `m × k_pq × sub_dim`, row-major.
    pub codebooks: Vec<f32>,
}

impl PqCodebook {
    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn codeword(&self, sub: usize, code: usize) -> &[f32] {
        let start = (sub * self.k_pq + code) * self.sub_dim;
        &self.codebooks[start..start + self.sub_dim]
    }

    fn subspace(&self, sub: usize) -> &[f32] {
        let len = self.k_pq * self.sub_dim;
        &self.codebooks[sub * len..(sub + 1) * len]
    }

    /// Nearest codeword per subspace; ties go to the lowest code.
    pub fn encode_residual(&self, residual: &[f32]) -> Vec<u8> {
        residual
            .chunks_exact(self.sub_dim)
            .enumerate()
            .map(|(j, sub)| nearest(self.subspace(j), self.sub_dim, sub).0 as u8)
            .collect()
    }

    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        codes
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| self.codeword(j, c as usize).iter().copied())
            .collect()
    }
}

pub(crate) fn residual(x: &[f32], centroid: &[f32]) -> Vec<f32> {
    x.iter().zip(centroid).map(|(&a, &b)| a - b).collect()
}

/// Trains one codebook per subspace on residuals to the assigned coarse
/// centroids. Subspace `j` uses k-means seeded with `seed + j`.
pub fn train_pq(
    data: &EmbeddingStore,
    assignments: &[u32],
    coarse: &KMeansModel,
    m: usize,
    seed: u64,
) -> Result<PqCodebook, IndexError> {
    let dim = data.dim();
    if m == 0 || !dim.is_multiple_of(m) {
        return Err(IndexError::NotDivisible { dim, m });
    }
    if coarse.dim != dim {
        return Err(IndexError::DimensionMismatch {
            expected: dim,
            actual: coarse.dim,
        });
    }
    if assignments.len() != data.rows() {
        return Err(IndexError::InvalidParameter(format!(
            "{} assignments for {} rows",
            assignments.len(),
            data.rows()
        )));
    }
    let sub_dim = dim / m;
    let n = data.rows();
    let k_pq = PQ_CODEWORDS.min(n);
    if n > 0 && n < PQ_CODEWORDS {
        info!(
            n,
            k_pq, "fewer training vectors than PQ codewords; capping codebook size"
        );
    }

    let residuals: Vec<f32> = data
        .iter_rows()
        .zip(assignments)
        .flat_map(|(x, &c)| residual(x, coarse.centroid(c as usize)))
        .collect();

    let mut codebooks = Vec::with_capacity(m * k_pq * sub_dim);
    if n > 0 {
        let params = KMeansParams::default();
        for j in 0..m {
            let sub: Vec<f32> = residuals
                .chunks_exact(dim)
                .flat_map(|r| r[j * sub_dim..(j + 1) * sub_dim].iter().copied())
                .collect();
            let (model, _) = kmeans_flat(&sub, sub_dim, k_pq, seed.wrapping_add(j as u64), &params)?;
            codebooks.extend_from_slice(&model.centroids);
        }
    }
    Ok(PqCodebook {
        m,
        sub_dim,
        k_pq,
        codebooks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::kmeans::kmeans_flat;

    fn coarse_zero(dim: usize) -> KMeansModel {
        KMeansModel {
            k: 1,
            dim,
            centroids: vec![0.0; dim],
            seed: 0,
            iterations_run: 0,
            inertia: 0.0,
            inertia_history: vec![],
        }
    }

    #[test]
    fn covering_codebook_is_lossless() {
        // 256 distinct values per subspace, each used twice.
        let dim = 4;
        let mut data = Vec::new();
        for _ in 0..2 {
            for i in 0..256u32 {
                let a = (i % 16) as f32 * 0.25;
                let b = (i / 16) as f32 * 0.5;
                data.extend_from_slice(&[a, b, b, a]);
            }
        }
        let store = EmbeddingStore::new(dim, data).unwrap();
        let pq = train_pq(&store, &vec![0; store.rows()], &coarse_zero(dim), 2, 5).unwrap();
        assert_eq!(pq.k_pq, 256);
        for x in store.iter_rows() {
            let codes = pq.encode_residual(x);
            assert_eq!(pq.decode(&codes), x);
        }
    }

    #[test]
    fn single_subquantizer_spans_full_dim() {
        let data: Vec<f32> = (0..300 * 4).map(|i| ((i * 31) % 17) as f32).collect();
        let store = EmbeddingStore::new(4, data).unwrap();
        let pq = train_pq(&store, &vec![0; 300], &coarse_zero(4), 1, 0).unwrap();
        assert_eq!(pq.sub_dim, 4);
        assert_eq!(pq.codebooks.len(), 256 * 4);
    }

    #[test]
    fn rejects_indivisible_dim() {
        let store = EmbeddingStore::new(128, vec![0.0; 128]).unwrap();
        let coarse = kmeans_flat(store.as_slice(), 128, 1, 0, &KMeansParams::default())
            .unwrap()
            .0;
        let err = train_pq(&store, &[0], &coarse, 7, 0).unwrap_err();
        assert_eq!(err, IndexError::NotDivisible { dim: 128, m: 7 });
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn small_training_set_caps_codebook() {
        let store = EmbeddingStore::new(2, (0..20).map(|i| i as f32).collect()).unwrap();
        let pq = train_pq(&store, &[0; 10], &coarse_zero(2), 2, 0).unwrap();
        assert_eq!(pq.k_pq, 10);
        for x in store.iter_rows() {
            assert_eq!(pq.decode(&pq.encode_residual(x)), x);
        }
    }
}
