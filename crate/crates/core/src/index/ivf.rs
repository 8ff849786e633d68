use std::cmp::Ordering;

use rayon::prelude::*;

use super::kmeans::{kmeans_flat, KMeansModel, KMeansParams};
use super::pq::{residual, train_pq, PqCodebook};
use super::IndexError;
use crate::manifest::EmbeddingStore;

/// `clamp(4·⌈√n⌉, 8, 1024)`, never more than `n`.
pub fn default_nlist(n: usize) -> usize {
    let root = (n as f64).sqrt().ceil() as usize;
    (4 * root).clamp(8, 1024).min(n)
}

pub fn default_nprobe(nlist: usize) -> usize {
    (nlist / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexParams {
    /// Coarse lists; [`default_nlist`] when `None`.
    pub nlist: Option<usize>,
    /// PQ subquantizers; must divide the dimension.
    pub m: usize,
    pub seed: u64,
    pub kmeans: KMeansParams,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            nlist: None,
            m: 8,
            seed: 0,
            kmeans: KMeansParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<u64>,
    /// `ids.len() × m` PQ codes.
    pub codes: Vec<u8>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    pub dim: usize,
    pub coarse: KMeansModel,
    pub pq: PqCodebook,
    pub lists: Vec<InvertedList>,
    pub n: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// Squared L2 (ADC approximation).
    pub distance: f32,
}

/// Neighbours by ascending distance, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResult {
    pub neighbors: Vec<Neighbor>,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

impl IvfPqIndex {
    /// Trains the coarse quantizer and codebooks on `store` and adds every
    /// row, using the row index as sample id.
    pub fn build(store: &EmbeddingStore, params: &IndexParams) -> Result<Self, IndexError> {
        let dim = store.dim();
        let m = params.m;
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(IndexError::NotDivisible { dim, m });
        }
        let n = store.rows();
        let nlist = params.nlist.unwrap_or_else(|| default_nlist(n));
        if n == 0 {
            return Ok(Self::empty(dim, m, params.seed));
        }
        if nlist == 0 {
            return Err(IndexError::InvalidParameter("nlist must be >= 1".into()));
        }
        let (coarse, assignment) = kmeans_flat(store.as_slice(), dim, nlist, params.seed, &params.kmeans)?;
        let pq = train_pq(store, &assignment, &coarse, m, params.seed.wrapping_add(1))?;

        let codes: Vec<Vec<u8>> = store
            .as_slice()
            .par_chunks_exact(dim)
            .zip(assignment.par_iter())
            .map(|(x, &c)| pq.encode_residual(&residual(x, coarse.centroid(c as usize))))
            .collect();
        let mut lists = vec![InvertedList::default(); nlist];
        for (id, (&c, code)) in assignment.iter().zip(codes).enumerate() {
            let list = &mut lists[c as usize];
            list.ids.push(id as u64);
            list.codes.extend_from_slice(&code);
        }
        Ok(Self {
            dim,
            coarse,
            pq,
            lists,
            n: n as u64,
            seed: params.seed,
        })
    }

    fn empty(dim: usize, m: usize, seed: u64) -> Self {
        Self {
            dim,
            coarse: KMeansModel {
                k: 0,
                dim,
                centroids: Vec::new(),
                seed,
                iterations_run: 0,
                inertia: 0.0,
                inertia_history: Vec::new(),
            },
            pq: PqCodebook {
                m,
                sub_dim: dim / m,
                k_pq: 0,
                codebooks: Vec::new(),
            },
            lists: Vec::new(),
            n: 0,
            seed,
        }
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn m(&self) -> usize {
        self.pq.m
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Every stored entry as `(id, list, codes)`.
    pub fn entries(&self) -> impl Iterator<Item = (u64, usize, &[u8])> + '_ {
        let m = self.pq.m;
        self.lists.iter().enumerate().flat_map(move |(l, list)| {
            list.ids
                .iter()
                .zip(list.codes.chunks_exact(m))
                .map(move |(&id, codes)| (id, l, codes))
        })
    }

    /// Coarse centroid plus decoded residual.
    pub fn reconstruct(&self, list: usize, codes: &[u8]) -> Vec<f32> {
        self.coarse
            .centroid(list)
            .iter()
            .zip(self.pq.decode(codes))
            .map(|(&c, r)| c + r)
            .collect()
    }

    fn check_dim(&self, x: &[f32]) -> Result<(), IndexError> {
        if x.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Coarse list and PQ codes for `x`.
pub fn encode(x: &[f32], index: &IvfPqIndex) -> Result<(usize, Vec<u8>), IndexError> {
    index.check_dim(x)?;
    if index.nlist() == 0 {
        return Err(IndexError::InvalidParameter("index has no coarse centroids".into()));
    }
    let (list, _) = index.coarse.nearest(x);
    let codes = index.pq.encode_residual(&residual(x, index.coarse.centroid(list)));
    Ok((list, codes))
}

/// Top-`k` ADC search over the `nprobe` nearest lists.
pub fn search(query: &[f32], index: &IvfPqIndex, k: usize, nprobe: usize) -> Result<SearchResult, IndexError> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    index.check_dim(query)?;
    if index.is_empty() {
        return Ok(SearchResult::default());
    }
    let nlist = index.nlist();
    if nprobe == 0 || nprobe > nlist {
        return Err(IndexError::BadProbe { nprobe, nlist });
    }

    let mut coarse: Vec<(f64, usize)> = index
        .coarse
        .centroids
        .chunks_exact(index.dim)
        .enumerate()
        .map(|(c, centroid)| (crate::scalar::squared_l2_wide(query, centroid), c))
        .collect();
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let pq = &index.pq;
    let (m, k_pq, sub_dim) = (pq.m, pq.k_pq, pq.sub_dim);
    let mut table = vec![0.0f32; m * k_pq];
    let mut candidates = Vec::new();
    for &(_, list_id) in coarse.iter().take(nprobe) {
        let list = &index.lists[list_id];
        if list.is_empty() {
            continue;
        }
        let r = residual(query, index.coarse.centroid(list_id));
        for (j, sub) in r.chunks_exact(sub_dim).enumerate() {
            for c in 0..k_pq {
                table[j * k_pq + c] = crate::scalar::squared_l2(sub, pq.codeword(j, c));
            }
        }
        for (&id, codes) in list.ids.iter().zip(list.codes.chunks_exact(m)) {
            let distance = codes
                .iter()
                .enumerate()
                .map(|(j, &c)| table[j * k_pq + c as usize])
                .sum();
            candidates.push(Neighbor { id, distance });
        }
    }

    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, by_distance_then_id);
        candidates.truncate(k);
    }
    candidates.sort_by(by_distance_then_id);
    Ok(SearchResult { neighbors: candidates })
}
