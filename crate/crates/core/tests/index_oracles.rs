use std::time::Instant;

use lfa_core::index::{deserialize_index, encode, normalize_rows, search, serialize_index, IndexParams, IvfPqIndex};
use lfa_core::manifest::EmbeddingStore;
use lfa_core::synth::gaussian_mixture;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Exact kNN by double-precision squared L2, ties by ascending id.
fn brute_force(store: &EmbeddingStore, q: &[f32], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = store
        .iter_rows()
        .enumerate()
        .map(|(i, x)| {
            let d = x
                .iter()
                .zip(q)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            (i as u64, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Eight far-apart integer centres in 16 dimensions, each surrounded by
/// ± pairs of small integer offsets. Cluster means are exactly the centres,
/// and each 2-wide residual subvector takes one of 25 values, so 256-entry
/// codebooks reproduce every residual exactly.
fn lossless_store(n: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n / 2 {
        let c = i % 8;
        let mut centre = vec![0.0f32; dim];
        centre[c] = 100.0;
        centre[c + 8] = 100.0;
        let offset: Vec<f32> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
        rows.push(centre.iter().zip(&offset).map(|(c, o)| c + o).collect::<Vec<_>>());
        rows.push(centre.iter().zip(&offset).map(|(c, o)| c - o).collect::<Vec<_>>());
    }
    EmbeddingStore::from_rows(dim, &rows).unwrap()
}

#[test]
fn lossless_regime_matches_brute_force() {
    let store = lossless_store(2000, 11);
    let index = IvfPqIndex::build(
        &store,
        &IndexParams {
            nlist: Some(8),
            m: 8,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    // Precondition: every stored vector reconstructs exactly.
    for (id, list, codes) in index.entries() {
        assert_eq!(index.reconstruct(list, codes), store.row(id as usize), "row {id}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let c = rng.gen_range(0..8);
        let q: Vec<f32> = (0..16)
            .map(|d| {
                let centre = if d == c || d == c + 8 { 100.0 } else { 0.0 };
                centre + rng.gen_range(-6i32..=6) as f32 * 0.5
            })
            .collect();
        let got = search(&q, &index, 10, index.nlist()).unwrap();
        let want = brute_force(&store, &q, 10);
        let got_pairs: Vec<(u64, f64)> = got.neighbors.iter().map(|n| (n.id, f64::from(n.distance))).collect();
        assert_eq!(got_pairs, want);
    }
}

/// `n` unit vectors around `clusters` Gaussian centres in `dim` dimensions.
fn clustered(n: usize, dim: usize, clusters: usize, spread: f64, rng: &mut ChaCha8Rng) -> EmbeddingStore {
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let c = &centres[rng.gen_range(0..clusters)];
            c.iter()
                .map(|&v| (v + spread * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect();
    normalize_rows(&EmbeddingStore::from_rows(dim, &rows).unwrap()).unwrap()
}

fn recall_at_10(store: &EmbeddingStore, index: &IvfPqIndex, queries: &EmbeddingStore, nprobe: usize) -> f64 {
    let mut hits = 0;
    for q in queries.iter_rows() {
        let truth: Vec<u64> = brute_force(store, q, 10).into_iter().map(|(id, _)| id).collect();
        let got = search(q, index, 10, nprobe).unwrap().ids();
        hits += got.iter().filter(|id| truth.contains(id)).count();
    }
    hits as f64 / (10 * queries.rows()) as f64
}

#[test]
fn recall_budget_on_clustered_data() {
    let (all, _) = gaussian_mixture(11_000, 64, 100, 4, 1.0, 1);
    let store = EmbeddingStore::new(64, all.as_slice()[..10_000 * 64].to_vec()).unwrap();
    let queries = EmbeddingStore::new(64, all.as_slice()[10_000 * 64..].to_vec()).unwrap();
    let started = Instant::now();
    let index = IvfPqIndex::build(
        &store,
        &IndexParams {
            nlist: Some(64),
            m: 8,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let build = started.elapsed();
    let started = Instant::now();
    for q in queries.iter_rows() {
        search(q, &index, 10, 8).unwrap();
    }
    let queries_time = started.elapsed();
    let recall = recall_at_10(&store, &index, &queries, 8);
    assert!(recall >= 0.8, "recall@10 = {recall}");
    assert!(build.as_secs_f64() < 60.0, "build took {build:?}");
    assert!(queries_time.as_secs_f64() < 2.0, "1000 queries took {queries_time:?}");
}

#[test]
fn adc_distance_matches_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let store = clustered(600, 16, 6, 0.5, &mut rng);
    let index = IvfPqIndex::build(
        &store,
        &IndexParams {
            m: 4,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let decoded: Vec<(u64, Vec<f32>)> = index
        .entries()
        .map(|(id, list, codes)| (id, index.reconstruct(list, codes)))
        .collect();
    for q in store.iter_rows().step_by(50) {
        let r = search(q, &index, 600, index.nlist()).unwrap();
        assert_eq!(r.neighbors.len(), 600);
        for n in &r.neighbors {
            let x = &decoded.iter().find(|(id, _)| *id == n.id).unwrap().1;
            let direct: f64 = q
                .iter()
                .zip(x)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            assert!(
                (f64::from(n.distance) - direct).abs() <= 1e-4,
                "{} vs {direct}",
                n.distance
            );
        }
    }
}

#[test]
fn build_is_deterministic_and_k_beyond_n_returns_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = clustered(120, 8, 3, 0.5, &mut rng);
    let params = IndexParams {
        m: 2,
        seed: 9,
        ..Default::default()
    };
    let a = IvfPqIndex::build(&store, &params).unwrap();
    let b = IvfPqIndex::build(&store, &params).unwrap();
    assert_eq!(serialize_index(&a), serialize_index(&b));
    let r = search(store.row(0), &a, 500, a.nlist()).unwrap();
    let mut ids = r.ids();
    ids.sort_unstable();
    assert_eq!(ids, (0..120).collect::<Vec<u64>>());
}

#[test]
fn serialization_round_trip_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = clustered(1500, 32, 20, 0.4, &mut rng);
    let index = IvfPqIndex::build(
        &store,
        &IndexParams {
            m: 4,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let bytes = serialize_index(&index);
    let back = deserialize_index(&bytes).unwrap();
    assert_eq!(serialize_index(&back), bytes);
    let nprobe = index.nlist() / 4;
    for q in store.iter_rows().step_by(15) {
        assert_eq!(
            search(q, &index, 10, nprobe).unwrap(),
            search(q, &back, 10, nprobe).unwrap()
        );
    }
    assert_eq!(
        EmbeddingStore::from_bytes(&store.to_bytes()).unwrap().to_bytes(),
        store.to_bytes()
    );
}

#[test]
fn stored_vector_is_its_own_nearest_neighbour_when_lossless() {
    let store = lossless_store(400, 3);
    let index = IvfPqIndex::build(
        &store,
        &IndexParams {
            nlist: Some(8),
            m: 8,
            ..Default::default()
        },
    )
    .unwrap();
    for i in (0..400).step_by(37) {
        let q = store.row(i);
        let top = &search(q, &index, 3, 8).unwrap().neighbors[0];
        assert_eq!(top.distance, 0.0);
        // Duplicated rows tie at zero; the smallest id among them wins.
        let first_dup = (0..400).find(|&j| store.row(j) == q).unwrap();
        assert_eq!(top.id, first_dup as u64);
        let (list, codes) = encode(q, &index).unwrap();
        assert_eq!(index.reconstruct(list, &codes), q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Recall itself need not be monotone: extra lists can bring in candidates whose
    // approximate distance beats a true neighbour. The candidate set only grows, though,
    // so every rank's distance can only shrink.
    #[test]
    fn ranked_distances_non_increasing_in_nprobe(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = clustered(900, 16, 10, 0.6, &mut rng);
        let store = EmbeddingStore::new(16, all.as_slice()[..800 * 16].to_vec()).unwrap();
        let queries = EmbeddingStore::new(16, all.as_slice()[800 * 16..].to_vec()).unwrap();
        let index = IvfPqIndex::build(&store, &IndexParams { nlist: Some(16), m: 4, seed, ..Default::default() }).unwrap();
        for q in queries.iter_rows().take(20) {
            let mut last: Option<Vec<f32>> = None;
            for nprobe in [1, 2, 4, 8, 16] {
                let d: Vec<f32> = search(q, &index, 10, nprobe).unwrap().neighbors.iter().map(|n| n.distance).collect();
                if let Some(prev) = &last {
                    prop_assert!(d.len() >= prev.len());
                    for (i, (a, b)) in d.iter().zip(prev).enumerate() {
                        prop_assert!(a <= b, "nprobe {} rank {}: {} > {}", nprobe, i, a, b);
                    }
                }
                last = Some(d);
            }
        }
        prop_assert!(recall_at_10(&store, &index, &queries, 16) >= recall_at_10(&store, &index, &queries, 1) - 0.05);
    }

    #[test]
    fn results_sorted_and_bounded(seed in 0u64..1000, k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = clustered(300, 8, 5, 0.5, &mut rng);
        let index = IvfPqIndex::build(&store, &IndexParams { m: 2, seed, ..Default::default() }).unwrap();
        let r = search(store.row(0), &index, k, index.nlist()).unwrap();
        prop_assert_eq!(r.neighbors.len(), k.min(300));
        for w in r.neighbors.windows(2) {
            prop_assert!((w[0].distance, w[0].id) <= (w[1].distance, w[1].id));
        }
    }
}
