//! Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic for a fixed seed: the seed drives a ChaCha8 stream, the
//! parallel assignment step writes per-point results that are reduced in
//! point order, and all ties go to the lowest id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::IndexError;
use crate::manifest::EmbeddingStore;
use crate::scalar::squared_l2_wide;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the relative inertia decrease falls below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 25,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub seed: u64,
    pub iterations_run: usize,
    pub inertia: f64,
    /// Inertia after the seeding assignment and after every Lloyd step.
    pub inertia_history: Vec<f64>,
}

impl KMeansModel {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest id.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, x)
    }
}

pub(crate) fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2_wide(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the rows of `data` into `k` groups.
pub fn kmeans(
    data: &EmbeddingStore,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansModel, IndexError> {
    kmeans_flat(data.as_slice(), data.dim(), k, seed, &KMeansParams { max_iter, tol }).map(|(m, _)| m)
}

/// k-means over a flat row-major slice; also returns the final assignment.
pub fn kmeans_flat(
    data: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<(KMeansModel, Vec<u32>), IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidParameter("k must be >= 1".into()));
    }
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(IndexError::InvalidParameter(
            "data length is not a multiple of dim".into(),
        ));
    }
    let n = data.len() / dim;
    if n < k {
        return Err(IndexError::TooFewPoints { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);

    let (mut assignment, mut inertia) = assign(data, dim, &centroids);
    let mut history = vec![inertia];
    let mut iterations_run = 0;
    for iter in 1..=params.max_iter {
        update_centroids(data, dim, k, &mut assignment, &mut centroids);
        let (next, next_inertia) = assign(data, dim, &centroids);
        iterations_run = iter;
        history.push(next_inertia);
        let unchanged = next == assignment;
        let rel = if inertia > 0.0 {
            (inertia - next_inertia) / inertia
        } else {
            0.0
        };
        assignment = next;
        inertia = next_inertia;
        if unchanged || rel < params.tol {
            break;
        }
    }

    let model = KMeansModel {
        k,
        dim,
        centroids,
        seed,
        iterations_run,
        inertia,
        inertia_history: history,
    };
    Ok((model, assignment))
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| squared_l2_wide(row(i), row(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Fewer distinct points than k: duplicate the first unused row.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = squared_l2_wide(row(i), &c);
            if nd < *d {
                *d = nd;
            }
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, f64) {
    let results: Vec<(u32, f64)> = data
        .par_chunks_exact(dim)
        .map(|x| {
            let (c, d) = nearest(centroids, dim, x);
            (c as u32, d)
        })
        .collect();
    let inertia = results.iter().map(|&(_, d)| d).sum();
    (results.into_iter().map(|(c, _)| c).collect(), inertia)
}

/// Recomputes centroids as member means (f64 sums). An empty cluster takes
/// over the point of the largest cluster farthest from that cluster's mean.
fn update_centroids(data: &[f32], dim: usize, k: usize, assignment: &mut [u32], centroids: &mut [f32]) {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &c) in data.chunks_exact(dim).zip(assignment.iter()) {
        let c = c as usize;
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *s += f64::from(v);
        }
    }
    let mean_of = |sums: &[f64], counts: &[usize], c: usize| -> Vec<f32> {
        sums[c * dim..(c + 1) * dim]
            .iter()
            .map(|&s| (s / counts[c] as f64) as f32)
            .collect()
    };

    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        if counts[donor] < 2 {
            continue;
        }
        let donor_mean = mean_of(&sums, &counts, donor);
        let mut far = (usize::MAX, 0.0f64);
        for (i, x) in data.chunks_exact(dim).enumerate() {
            if assignment[i] as usize == donor {
                let d = squared_l2_wide(x, &donor_mean);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        if far.0 == usize::MAX {
            continue;
        }
        let x = &data[far.0 * dim..(far.0 + 1) * dim];
        assignment[far.0] = empty as u32;
        counts[donor] -= 1;
        counts[empty] = 1;
        for j in 0..dim {
            let v = f64::from(x[j]);
            sums[donor * dim + j] -= v;
            sums[empty * dim + j] = v;
        }
    }

    for c in 0..k {
        if counts[c] > 0 {
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&mean_of(&sums, &counts, c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clouds() -> EmbeddingStore {
        let mut data = Vec::new();
        for _ in 0..10 {
            data.extend_from_slice(&[0.0, 0.0]);
            data.extend_from_slice(&[1.0, 1.0]);
        }
        EmbeddingStore::new(2, data).unwrap()
    }

    #[test]
    fn fixed_point_on_exact_clouds() {
        let model = kmeans(&two_clouds(), 2, 3, 25, 1e-4).unwrap();
        let mut cs: Vec<Vec<f32>> = (0..2).map(|c| model.centroid(c).to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn single_centroid_is_mean() {
        let store = EmbeddingStore::new(2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).unwrap();
        let model = kmeans(&store, 1, 0, 25, 1e-4).unwrap();
        assert_eq!(model.centroid(0), &[2.0, 4.0]);
    }

    #[test]
    fn deterministic_for_seed() {
        let data: Vec<f32> = (0..600).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        let store = EmbeddingStore::new(3, data).unwrap();
        let a = kmeans(&store, 7, 11, 25, 1e-4).unwrap();
        let b = kmeans(&store, 7, 11, 25, 1e-4).unwrap();
        assert_eq!(a, b);
        let bits = |m: &KMeansModel| m.centroids.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn too_few_points() {
        let store = EmbeddingStore::new(2, vec![0.0, 1.0]).unwrap();
        assert_eq!(
            kmeans(&store, 2, 0, 25, 1e-4).unwrap_err(),
            IndexError::TooFewPoints { n: 1, k: 2 }
        );
    }

    #[test]
    fn duplicate_points_fill_all_centroids() {
        let store = EmbeddingStore::new(2, vec![0.5; 20]).unwrap();
        let model = kmeans(&store, 3, 0, 25, 1e-4).unwrap();
        assert_eq!(model.k, 3);
        assert!(model.centroids.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_cluster_is_repaired() {
        let data = vec![0.0f32, 0.0, 1.0, 0.0, 2.0, 0.0, 11.0, 0.0];
        let mut assignment = vec![0u32, 0, 0, 0];
        let mut centroids = vec![0.0f32; 4];
        update_centroids(&data, 2, 2, &mut assignment, &mut centroids);
        assert_eq!(assignment, vec![0, 0, 0, 1]);
        assert_eq!(&centroids[2..], &[11.0, 0.0]);
    }
}
