use super::forward::{AttentionCache, AttentionInputs, BlockActivations, ExpertBundle, GateCache, KvPair, MofeForward};
use super::matrix::Matrix;
use super::params::{BlockParams, MofeParams};
use super::{GateGranularity, MofeError, Result};
use crate::scalar::Scalar;

/// Gradients with respect to every non-parameter input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads<T> {
    pub bundle: ExpertBundle<T>,
    pub q: Matrix<T>,
    pub ctx: KvPair<T>,
    pub img: KvPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MofeGrads<T> {
    /// Same layout as the parameters they differentiate.
    pub params: MofeParams<T>,
    pub inputs: InputGrads<T>,
}

fn zeros_like<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::zeros(m.rows(), m.cols())
}

fn kv_zeros<T: Scalar>(kv: &KvPair<T>) -> KvPair<T> {
    KvPair {
        keys: zeros_like(&kv.keys),
        values: zeros_like(&kv.values),
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`, the softmax Jacobian applied row-wise.
fn softmax_backward<T: Scalar>(probs: &Matrix<T>, d_probs: &Matrix<T>) -> Matrix<T> {
    let mut out = zeros_like(probs);
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner = crate::scalar::dot(p, dp);
        for ((o, &pi), &dpi) in out.row_mut(r).iter_mut().zip(p).zip(dp) {
            *o = pi * (dpi - inner);
        }
    }
    out
}

/// Backward through `o = softmax(q·Kᵀ/√d)·V`; accumulates into `dq` and `dkv`.
fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    kv: &KvPair<T>,
    cache: &AttentionCache<T>,
    d_out: &Matrix<T>,
    dq: &mut Matrix<T>,
    dkv: &mut KvPair<T>,
) {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    dkv.values.add_assign(&cache.probs.t_matmul(d_out));
    let d_probs = d_out.matmul_t(&kv.values);
    let d_scores = softmax_backward(&cache.probs, &d_probs).scale(scale);
    dq.add_assign(&d_scores.matmul(&kv.keys));
    dkv.keys.add_assign(&d_scores.t_matmul(q));
}

fn gate_backward<T: Scalar>(
    block: &BlockParams<T>,
    cache: &GateCache<T>,
    w: &Matrix<T>,
    d_w: &Matrix<T>,
    grad: &mut BlockParams<T>,
) -> Matrix<T> {
    let n = w.rows();
    match cache.granularity {
        GateGranularity::PerToken => {
            let d_logits = softmax_backward(w, d_w);
            block.gate.backward(&cache.net, &d_logits, &mut grad.gate)
        }
        GateGranularity::PerStream => {
            // Every token shares one softmax row; its gradient is the token sum.
            let probs = Matrix::from_vec(1, 3, w.row(0).to_vec());
            let d_probs = Matrix::from_vec(1, 3, d_w.sum_rows());
            let d_logits = softmax_backward(&probs, &d_probs);
            let d_pooled = block.gate.backward(&cache.net, &d_logits, &mut grad.gate);
            let inv = T::one() / T::of(n as f64);
            Matrix::from_fn(n, d_pooled.cols(), |_, c| d_pooled[(0, c)] * inv)
        }
    }
}

/// Backward through one block. Returns gradients for the three projected
/// streams; parameter and attention-input gradients are accumulated in place.
fn block_backward<T: Scalar>(
    act: &BlockActivations<T>,
    block: &BlockParams<T>,
    inputs: &AttentionInputs<T>,
    d_o: &Matrix<T>,
    grad: &mut BlockParams<T>,
    input_grads: &mut InputGrads<T>,
) -> [Matrix<T>; 3] {
    let q = &inputs.q;
    attention_backward(
        q,
        &inputs.ctx,
        &act.attn[0],
        d_o,
        &mut input_grads.q,
        &mut input_grads.ctx,
    );
    attention_backward(
        q,
        &inputs.img,
        &act.attn[1],
        d_o,
        &mut input_grads.q,
        &mut input_grads.img,
    );
    let fused = KvPair {
        keys: act.k_fused.clone(),
        values: act.v_fused.clone(),
    };
    let mut d_fused = kv_zeros(&fused);
    attention_backward(q, &fused, &act.attn[2], d_o, &mut input_grads.q, &mut d_fused);

    let mut d_f = block.w_k.backward(&act.f_fused, &d_fused.keys, &mut grad.w_k);
    d_f.add_assign(&block.w_v.backward(&act.f_fused, &d_fused.values, &mut grad.w_v));

    let experts = [&act.e_id, &act.e_sem, &act.e_det];
    let (n, d) = act.e_id.shape();
    let d_w = Matrix::from_fn(n, 3, |t, a| crate::scalar::dot(d_f.row(t), experts[a].row(t)));
    let mut d_e = [0, 1, 2].map(|a| Matrix::from_fn(n, d, |t, c| act.w[(t, a)] * d_f[(t, c)]));

    let d_ec = gate_backward(block, &act.gate, &act.w, &d_w, grad);
    for (a, de) in d_e.iter_mut().enumerate() {
        de.add_assign(&d_ec.col_slice(a * d, d));
    }
    [0, 1, 2].map(|a| block.experts[a].backward(&act.experts[a], &d_e[a], &mut grad.experts[a]))
}

/// Analytic gradients of a loss whose gradient with respect to each injected
/// block's output is `d_outputs[i]` (same order as `forward.blocks`).
pub fn mofe_backward<T: Scalar>(
    d_outputs: &[Matrix<T>],
    forward: &MofeForward<T>,
    bundle: &ExpertBundle<T>,
    inputs: &AttentionInputs<T>,
    params: &MofeParams<T>,
) -> Result<MofeGrads<T>> {
    if d_outputs.len() != forward.blocks.len() {
        return Err(MofeError::MissingActivations(format!(
            "{} output gradients for {} cached blocks",
            d_outputs.len(),
            forward.blocks.len()
        )));
    }
    let mut grads = params.zeros_like();
    let mut input_grads = InputGrads {
        bundle: ExpertBundle {
            f_id: zeros_like(&bundle.f_id),
            f_sem: zeros_like(&bundle.f_sem),
            f_det: zeros_like(&bundle.f_det),
        },
        q: zeros_like(&inputs.q),
        ctx: kv_zeros(&inputs.ctx),
        img: kv_zeros(&inputs.img),
    };
    let mut d_projected = forward.projected.clone().map(|m| zeros_like(&m));

    for (act, d_o) in forward.blocks.iter().zip(d_outputs) {
        if d_o.shape() != act.o.shape() {
            return Err(MofeError::Shape(format!(
                "output gradient {:?} for block {}, expected {:?}",
                d_o.shape(),
                act.block,
                act.o.shape()
            )));
        }
        let idx = params
            .blocks
            .iter()
            .position(|b| b.block == act.block)
            .ok_or_else(|| MofeError::MissingActivations(format!("no parameters for block {}", act.block)))?;
        let d_streams = block_backward(
            act,
            &params.blocks[idx],
            inputs,
            d_o,
            &mut grads.blocks[idx],
            &mut input_grads,
        );
        for (acc, d) in d_projected.iter_mut().zip(&d_streams) {
            acc.add_assign(d);
        }
    }

    for (a, d_p) in d_projected.iter().enumerate() {
        let x = bundle.streams()[a];
        let dx = params.projections[a].backward(x, d_p, &mut grads.projections[a]);
        input_grads.bundle.streams_mut()[a].add_assign(&dx);
    }
    Ok(MofeGrads {
        params: grads,
        inputs: input_grads,
    })
}
