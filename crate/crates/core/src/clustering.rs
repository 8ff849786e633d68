//! Two-pass identity clustering and identity-disjoint splitting.
//!
//! Pass 1 links samples whose exact cosine similarity exceeds `tau_high`,
//! with candidate pairs proposed by the IVF-PQ index, and takes connected
//! components. Pass 2 attaches each remaining singleton to the most similar
//! multi-member cluster centroid when that similarity exceeds `tau_low`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{default_nprobe, search, IndexError, IvfPqIndex};
use crate::manifest::EmbeddingStore;
use crate::scalar::dot;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("index covers {index} samples but the store has {store}")]
    IndexMismatch { index: usize, store: usize },
    #[error("no truth label for sample {0}")]
    MissingTruth(u64),
    #[error("need at least 2 clusters to split, got {0}")]
    TooFewClusters(usize),
    #[error("test fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    /// Neighbours requested per sample when building the pass-1 graph.
    pub knn: usize,
    /// Lists probed per query; the index default when `None`.
    pub nprobe: Option<usize>,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            tau_high: 0.75,
            tau_low: 0.50,
            knn: 16,
            nprobe: None,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let (lo, hi) = (self.tau_low, self.tau_high);
        if !(-1.0 < lo && lo < hi && hi < 1.0) {
            return Err(ClusterError::InvalidConfig(format!(
                "need -1 < tau_low < tau_high < 1, got tau_low={lo}, tau_high={hi}"
            )));
        }
        if self.knn == 0 {
            return Err(ClusterError::InvalidConfig("knn must be >= 1".into()));
        }
        Ok(())
    }
}

/// Disjoint-set forest with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] += 1;
        }
        true
    }
}

/// Dense cluster labels indexed by sample id. Cluster ids are numbered in
/// order of each cluster's smallest member id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    /// Relabels an arbitrary grouping canonically.
    pub fn canonical(groups: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let labels = groups
            .iter()
            .map(|g| {
                let next = map.len();
                *map.entry(*g).or_insert(next)
            })
            .collect();
        Self {
            labels,
            n_clusters: map.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in &self.labels {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Default probe count for graph construction: the index default, raised so
/// the probed lists hold about `k` points on average. Small corpora have
/// nearly one point per list, where the index default would find almost no
/// neighbours.
pub fn candidate_nprobe(nlist: usize, n: usize, k: usize) -> usize {
    if nlist == 0 || n == 0 {
        return 1;
    }
    let covering = (k * nlist).div_ceil(n);
    default_nprobe(nlist).max(covering).min(nlist)
}

fn unit_rows(store: &EmbeddingStore) -> Vec<Vec<f64>> {
    store
        .iter_rows()
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v
            }
        })
        .collect()
}

/// Clusters the rows of `store` (row index = sample id). Threshold tests use
/// exact cosine similarities recomputed from the stored vectors; the index
/// only proposes candidate pairs.
pub fn cluster(
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    cfg: &ClusterConfig,
) -> Result<ClusterAssignment, ClusterError> {
    cfg.validate()?;
    let n = store.rows();
    if index.len() != n {
        return Err(ClusterError::IndexMismatch {
            index: index.len(),
            store: n,
        });
    }
    if n == 0 {
        return Ok(ClusterAssignment {
            labels: Vec::new(),
            n_clusters: 0,
        });
    }
    let unit = unit_rows(store);
    let k = cfg.knn.saturating_add(1).min(n);
    let nprobe = cfg.nprobe.unwrap_or_else(|| candidate_nprobe(index.nlist(), n, k));

    let edges: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<usize>, ClusterError> {
            let result = search(store.row(i), index, k, nprobe)?;
            Ok(result
                .neighbors
                .iter()
                .map(|nb| nb.id as usize)
                .filter(|&j| j != i && dot(&unit[i], &unit[j]) > cfg.tau_high)
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let mut uf = UnionFind::new(n);
    for (i, js) in edges.iter().enumerate() {
        for &j in js {
            uf.union(i, j);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Ok(attach_singletons(&unit, &roots, cfg.tau_low))
}

/// Pass 2: singletons join the best multi-member centroid above `tau_low`.
/// Centroids are the renormalized means of the pass-1 members and stay fixed
/// while singletons attach, so the outcome does not depend on sample order.
fn attach_singletons(unit: &[Vec<f64>], groups: &[usize], tau_low: f64) -> ClusterAssignment {
    let pass1 = ClusterAssignment::canonical(groups);
    let members = pass1.members();
    let dim = unit.first().map_or(0, Vec::len);
    let centroids: Vec<(usize, Vec<f64>)> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() > 1)
        .map(|(c, m)| {
            let mut mean = vec![0.0; dim];
            for &i in m {
                for (acc, v) in mean.iter_mut().zip(&unit[i]) {
                    *acc += v;
                }
            }
            let norm = dot(&mean, &mean).sqrt();
            if norm > 0.0 {
                mean.iter_mut().for_each(|v| *v /= norm);
            }
            (c, mean)
        })
        .collect();

    let mut labels = pass1.labels.clone();
    for m in members.iter().filter(|m| m.len() == 1) {
        let i = m[0];
        let mut best: Option<(usize, f64)> = None;
        for (c, centroid) in &centroids {
            let s = dot(&unit[i], centroid);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((*c, s));
            }
        }
        if let Some((c, s)) = best {
            if s > tau_low {
                labels[i] = c;
            }
        }
    }
    ClusterAssignment::canonical(&labels)
}

/// Purity: fraction of samples belonging to their cluster's majority identity.
pub fn purity(assignment: &ClusterAssignment, truth: &BTreeMap<u64, u64>) -> Result<f64, ClusterError> {
    if assignment.is_empty() {
        return Ok(1.0);
    }
    let mut counts: Vec<BTreeMap<u64, usize>> = vec![BTreeMap::new(); assignment.n_clusters];
    for (i, &c) in assignment.labels.iter().enumerate() {
        let id = i as u64;
        let label = truth.get(&id).ok_or(ClusterError::MissingTruth(id))?;
        *counts[c].entry(*label).or_default() += 1;
    }
    let majority: usize = counts.iter().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignment.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub test_clusters: BTreeSet<usize>,
    pub train_clusters: BTreeSet<usize>,
}

/// Number of test clusters: `⌈fraction · n⌉`, kept within `[1, n − 1]`.
pub fn test_cluster_count(n_clusters: usize, test_fraction: f64) -> usize {
    // Absorb representation error so that e.g. 0.7 · 10 yields 7, not 8.
    let raw = test_fraction * n_clusters as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    count.clamp(1, n_clusters - 1)
}

/// Shuffles cluster ids with a seeded generator and sends the first
/// `⌈fraction · n⌉` to the test set.
pub fn split_identities(
    assignment: &ClusterAssignment,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitManifest, ClusterError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ClusterError::BadFraction(test_fraction));
    }
    let n = assignment.n_clusters;
    if n < 2 {
        return Err(ClusterError::TooFewClusters(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_cluster_count(n, test_fraction);
    Ok(SplitManifest {
        seed,
        test_fraction,
        test_clusters: order[..n_test].iter().copied().collect(),
        train_clusters: order[n_test..].iter().copied().collect(),
    })
}
