use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{mofe_backward, InputGrads};
use super::forward::{mofe_forward, AttentionInputs, ExpertBundle, KvPair, MofeForward};
use super::matrix::Matrix;
use super::params::MofeParams;
use super::{MofeConfig, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// A seeded toy instance: parameters plus every non-parameter input.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub cfg: MofeConfig,
    pub params: MofeParams<f64>,
    pub bundle: ExpertBundle<f64>,
    pub inputs: AttentionInputs<f64>,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

impl ToyProblem {
    /// `n_q` queries; context and image streams get `n_q + 1` and `n_q + 2` tokens.
    pub fn new(cfg: MofeConfig, n_q: usize) -> Result<Self> {
        let params = MofeParams::init(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let n = cfg.n_tokens;
        let d = cfg.d_model;
        let bundle = ExpertBundle {
            f_id: random_matrix(n, cfg.d_id, &mut rng),
            f_sem: random_matrix(n, cfg.d_sem, &mut rng),
            f_det: random_matrix(n, cfg.d_det, &mut rng),
        };
        let mut kv = |tokens| KvPair {
            keys: random_matrix(tokens, d, &mut rng),
            values: random_matrix(tokens, d, &mut rng),
        };
        let ctx = kv(n_q + 1);
        let img = kv(n_q + 2);
        let q = random_matrix(n_q, d, &mut rng);
        Ok(Self {
            cfg,
            params,
            bundle,
            inputs: AttentionInputs { q, ctx, img },
        })
    }

    pub fn forward(&self) -> Result<MofeForward<f64>> {
        mofe_forward(&self.bundle, &self.inputs, &self.params, &self.cfg)
    }

    /// `L = Σ_blocks Σ o`.
    pub fn loss(&self) -> Result<f64> {
        Ok(self.forward()?.blocks.iter().map(|b| b.o.sum()).sum())
    }

    /// Every entry of every block output, in block order; `loss` is their sum.
    fn loss_terms(&self) -> Result<Vec<f64>> {
        Ok(self
            .forward()?
            .blocks
            .iter()
            .flat_map(|b| b.o.as_slice().to_vec())
            .collect())
    }

    /// Mutable views of every differentiable tensor: parameters, then inputs.
    fn all_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            params: p,
            bundle,
            inputs,
            ..
        } = self;
        let mut out = p.tensors_mut();
        out.extend([
            bundle.f_id.as_mut_slice(),
            bundle.f_sem.as_mut_slice(),
            bundle.f_det.as_mut_slice(),
            inputs.q.as_mut_slice(),
            inputs.ctx.keys.as_mut_slice(),
            inputs.ctx.values.as_mut_slice(),
            inputs.img.keys.as_mut_slice(),
            inputs.img.values.as_mut_slice(),
        ]);
        out
    }
}

fn input_grad_tensors(g: &InputGrads<f64>) -> Vec<(String, &[f64])> {
    [
        ("f_id", g.bundle.f_id.as_slice()),
        ("f_sem", g.bundle.f_sem.as_slice()),
        ("f_det", g.bundle.f_det.as_slice()),
        ("q", g.q.as_slice()),
        ("ctx.keys", g.ctx.keys.as_slice()),
        ("ctx.values", g.ctx.values.as_slice()),
        ("img.keys", g.img.keys.as_slice()),
        ("img.values", g.img.values.as_slice()),
    ]
    .into_iter()
    .map(|(n, t)| (n.to_string(), t))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, REL_ERR_FLOOR)` over every coordinate.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Tensor name and flat index of the coordinate with the largest relative error.
    pub worst: String,
    pub n_checked: usize,
    /// `max |Σ_a w[t, a] − 1|` over all tokens and injected blocks.
    pub gate_row_sum_err: f64,
    pub blocks_injected: usize,
}

/// Compares analytic gradients of `L = Σ o` against central differences with
/// step `h` for every parameter and input coordinate.
pub fn gradient_check(problem: &ToyProblem, h: f64) -> Result<GradCheckReport> {
    let fwd = problem.forward()?;
    let d_outputs: Vec<_> = fwd
        .blocks
        .iter()
        .map(|b| Matrix::from_fn(b.o.rows(), b.o.cols(), |_, _| 1.0))
        .collect();
    let grads = mofe_backward(&d_outputs, &fwd, &problem.bundle, &problem.inputs, &problem.params)?;
    let gate_row_sum_err = fwd
        .blocks
        .iter()
        .flat_map(|b| (0..b.w.rows()).map(move |t| (b.w.row(t).iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);

    let mut analytic = grads.params.tensors();
    analytic.extend(input_grad_tensors(&grads.inputs));

    let mut work = problem.clone();
    let n_tensors = work.all_tensors_mut().len();
    assert_eq!(n_tensors, analytic.len(), "tensor layouts must line up");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        n_checked: 0,
        gate_row_sum_err,
        blocks_injected: fwd.blocks.len(),
    };
    for (ti, (name, a_grad)) in analytic.iter().enumerate() {
        for (k, &a) in a_grad.iter().enumerate() {
            let orig = work.all_tensors_mut()[ti][k];
            work.all_tensors_mut()[ti][k] = orig + h;
            let plus = work.loss_terms()?;
            work.all_tensors_mut()[ti][k] = orig - h;
            let minus = work.loss_terms()?;
            work.all_tensors_mut()[ti][k] = orig;
            // Differencing term by term avoids cancelling two large totals;
            // outputs the coordinate does not reach contribute exactly zero.
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = format!("{name}[{k}]");
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
