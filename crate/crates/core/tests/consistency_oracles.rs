use lfa_core::consistency::{
    consistency_gate, cosine_similarity, mean_off_diagonal, similarity_matrix, Boundary, GateConfig,
};
use lfa_core::manifest::EmbeddingStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean pairwise cosine over ordered pairs i ≠ j, straight from the raw rows.
fn naive_mean(rows: &[Vec<f32>]) -> f64 {
    let n = rows.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in rows[i].iter().zip(&rows[j]) {
                let (a, b) = (f64::from(a), f64::from(b));
                ab += a * b;
                aa += a * a;
                bb += b * b;
            }
            sum += ab / (aa.sqrt() * bb.sqrt());
        }
    }
    sum / (n * (n - 1)) as f64
}

#[test]
fn mean_matches_double_loop_on_random_clips() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for clip in 0..200 {
        let n = rng.gen_range(2..=64);
        let dim = rng.gen_range(2..=128);
        // Mix a shared direction with noise so means span the gate's range.
        let shared: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: f32 = rng.gen_range(0.0..3.0);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| shared.iter().map(|s| mix * s + rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let store = EmbeddingStore::from_rows(dim, &rows).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let got = mean_off_diagonal(&similarity_matrix(&idx, &store).unwrap()).unwrap();
        let want = naive_mean(&rows);
        assert!((got - want).abs() <= 1e-6, "clip {clip}: {got} vs {want}");
        let report = consistency_gate("c", &idx, &store, &GateConfig::default()).unwrap();
        assert_eq!(report.mean_similarity, Some(got));
        assert_eq!(report.retained, got > 0.6);
    }
}

#[test]
fn threshold_boundary_is_strict() {
    // cos((5,0), (3,4)) = 15/25, the same double as the literal 0.6.
    let store = EmbeddingStore::from_rows(2, &[vec![5.0f32, 0.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(cosine_similarity(&[5.0f64, 0.0], &[3.0, 4.0]).unwrap(), 0.6);
    let strict = consistency_gate("edge", &[0, 1], &store, &GateConfig::default()).unwrap();
    assert_eq!(strict.mean_similarity, Some(0.6));
    assert!(!strict.retained);
    let inclusive = GateConfig {
        boundary: Boundary::Inclusive,
        ..GateConfig::default()
    };
    assert!(consistency_gate("edge", &[0, 1], &store, &inclusive).unwrap().retained);
}

#[test]
fn fewer_than_two_embeddings_carry_no_mean() {
    let store = EmbeddingStore::from_rows(2, &[vec![1.0f32, 0.0]]).unwrap();
    let r = consistency_gate("one", &[0], &store, &GateConfig::default()).unwrap();
    assert_eq!(r.mean_similarity, None);
    assert!(!r.retained);
}

proptest! {
    #[test]
    fn mean_is_symmetric_bounded_and_scale_free(
        rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 6), 2..12),
        scale in 0.1f32..10.0,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f32>() > 1e-3));
        let store = EmbeddingStore::from_rows(6, &rows).unwrap();
        let idx: Vec<usize> = (0..rows.len()).collect();
        let m = similarity_matrix(&idx, &store).unwrap();
        for i in 0..m.n() {
            for j in 0..m.n() {
                prop_assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
            }
        }
        let mean = mean_off_diagonal(&m).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&mean));
        let scaled: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let s2 = EmbeddingStore::from_rows(6, &scaled).unwrap();
        let mean2 = mean_off_diagonal(&similarity_matrix(&idx, &s2).unwrap()).unwrap();
        prop_assert!((mean - mean2).abs() < 1e-5);
    }
}
