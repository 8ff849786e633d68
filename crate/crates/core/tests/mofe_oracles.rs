use lfa_core::mofe::{
    attention, gate_forward, gradient_check, parameter_overhead, Gate, GateGranularity, GateKind, KvPair, Matrix,
    MofeConfig, ToyProblem,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
}

fn gate_bias_mut(gate: &mut Gate<f64>) -> &mut Vec<f64> {
    match gate {
        Gate::Linear(l) => &mut l.bias,
        Gate::Mlp { fc2, .. } => &mut fc2.bias,
    }
}

fn configs() -> Vec<MofeConfig> {
    let mut out = Vec::new();
    for kind in [GateKind::Linear, GateKind::Mlp] {
        for granularity in [GateGranularity::PerToken, GateGranularity::PerStream] {
            let mut cfg = MofeConfig::toy(6, 5, 3);
            cfg.gate_kind = kind;
            cfg.gate_granularity = granularity;
            out.push(cfg);
        }
    }
    out
}

#[test]
fn gate_rows_sum_to_one_and_ignore_logit_shifts() {
    for cfg in configs() {
        let problem = ToyProblem::new(cfg.clone(), 3).unwrap();
        let fwd = problem.forward().unwrap();
        for (b, acts) in fwd.blocks.iter().enumerate() {
            for t in 0..acts.w.rows() {
                let row = acts.w.row(t);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
            for shift in [-7.5, 0.25, 40.0] {
                let mut gate = problem.params.blocks[b].gate.clone();
                gate_bias_mut(&mut gate).iter_mut().for_each(|v| *v += shift);
                let shifted = gate_forward(&acts.e_c, &gate, cfg.gate_granularity).unwrap();
                for (a, s) in acts.w.as_slice().iter().zip(shifted.as_slice()) {
                    assert!((a - s).abs() <= 1e-12, "shift {shift}: {a} vs {s}");
                }
            }
        }
    }
}

#[test]
fn one_hot_gate_recovers_the_chosen_expert_exactly() {
    for cfg in configs() {
        for chosen in 0..3 {
            let mut problem = ToyProblem::new(cfg.clone(), 2).unwrap();
            for block in &mut problem.params.blocks {
                // A logit gap of 1000 underflows the other weights to exactly zero.
                gate_bias_mut(&mut block.gate)[chosen] += 1000.0;
            }
            let fwd = problem.forward().unwrap();
            for acts in &fwd.blocks {
                let expert = [&acts.e_id, &acts.e_sem, &acts.e_det][chosen];
                for t in 0..acts.w.rows() {
                    let mut want = [0.0; 3];
                    want[chosen] = 1.0;
                    assert_eq!(acts.w.row(t), want);
                }
                assert_eq!(acts.f_fused.as_slice(), expert.as_slice());
            }
        }
    }
}

#[test]
fn single_token_attention_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for d in [1, 4, 8, 33] {
        let q = random(5, d, &mut rng);
        let kv = KvPair {
            keys: random(1, d, &mut rng).scale(50.0),
            values: random(1, d, &mut rng),
        };
        let (out, cache) = attention(&q, &kv);
        for t in 0..5 {
            assert_eq!(out.row(t), kv.values.row(0));
            assert_eq!(cache.probs.row(t), [1.0]);
        }
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for d in [4, 8] {
            for n in [2, 4] {
                let problem = ToyProblem::new(MofeConfig::toy(d, n, seed), n).unwrap();
                let r = gradient_check(&problem, 1e-5).unwrap();
                assert!(
                    r.max_rel_err < 1e-4,
                    "seed {seed} d {d} n {n}: {} at {}",
                    r.max_rel_err,
                    r.worst
                );
                assert!(r.gate_row_sum_err <= 1e-6);
                worst = worst.max(r.max_rel_err);
            }
        }
    }
    assert!(worst > 0.0, "finite differences should not be exact");
}

#[test]
fn gradient_variants_match_finite_differences() {
    for mut cfg in configs() {
        for seed in 0..5 {
            cfg.seed = seed;
            let r = gradient_check(&ToyProblem::new(cfg.clone(), 3).unwrap(), 1e-5).unwrap();
            assert!(
                r.max_rel_err < 1e-4,
                "{:?}/{:?} seed {seed}: {}",
                cfg.gate_kind,
                cfg.gate_granularity,
                r.max_rel_err
            );
        }
    }
}

#[test]
fn injection_layout_and_overhead_scaling() {
    let cfg = MofeConfig::default();
    let injected = cfg.injected_blocks();
    assert_eq!(injected.len(), 15);
    assert!(injected.iter().all(|b| b % 2 == 0 && *b < 30));
    assert!((0..30).all(|b| cfg.is_injected(b) == (b % 2 == 0)));
    let a = parameter_overhead(&cfg, 1_300_000_000).unwrap();
    let b = parameter_overhead(&cfg, 2_600_000_000).unwrap();
    assert_eq!(a.injected_blocks, 15);
    assert_eq!(a.mofe_params, b.mofe_params);
    assert!((a.ratio / b.ratio - 2.0).abs() < 1e-12);

    let toy = MofeConfig::toy(4, 2, 0);
    let problem = ToyProblem::new(toy.clone(), 2).unwrap();
    let blocks: Vec<usize> = problem.params.blocks.iter().map(|b| b.block).collect();
    assert_eq!(blocks, toy.injected_blocks());
    assert_eq!(problem.forward().unwrap().blocks.len(), blocks.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicating_every_token_leaves_attention_unchanged(seed in any::<u64>(), n in 1usize..6, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(3, d, &mut rng);
        let kv = KvPair { keys: random(n, d, &mut rng), values: random(n, d, &mut rng) };
        let doubled = KvPair {
            keys: Matrix::vcat(&[&kv.keys, &kv.keys]),
            values: Matrix::vcat(&[&kv.values, &kv.values]),
        };
        let (a, _) = attention(&q, &kv);
        let (b, _) = attention(&q, &doubled);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_output_lies_in_value_hull(seed in any::<u64>(), n in 1usize..6, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(4, d, &mut rng);
        let kv = KvPair { keys: random(n, d, &mut rng), values: random(n, d, &mut rng) };
        let (out, cache) = attention(&q, &kv);
        for t in 0..4 {
            prop_assert!((cache.probs.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..d {
                let col: Vec<f64> = (0..n).map(|i| kv.values.row(i)[c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.row(t)[c] >= lo - 1e-12 && out.row(t)[c] <= hi + 1e-12);
            }
        }
    }
}
