use super::layers::{ExpertCache, Gate, GateNetCache};
use super::matrix::Matrix;
use super::params::{BlockParams, MofeParams};
use super::{GateGranularity, MofeConfig, MofeError, Result};
use crate::scalar::Scalar;

/// Encoder features for the identity, semantic and detail streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle<T> {
    pub f_id: Matrix<T>,
    pub f_sem: Matrix<T>,
    pub f_det: Matrix<T>,
}

impl<T: Scalar> ExpertBundle<T> {
    pub fn streams(&self) -> [&Matrix<T>; 3] {
        [&self.f_id, &self.f_sem, &self.f_det]
    }

    pub fn streams_mut(&mut self) -> [&mut Matrix<T>; 3] {
        [&mut self.f_id, &mut self.f_sem, &mut self.f_det]
    }

    fn check(&self, params: &MofeParams<T>) -> Result<()> {
        let tokens = self.f_id.rows();
        for (i, (f, p)) in self.streams().into_iter().zip(&params.projections).enumerate() {
            if f.rows() != tokens {
                return Err(MofeError::Shape(format!(
                    "stream {i} has {} tokens, expected {tokens}",
                    f.rows()
                )));
            }
            if f.cols() != p.input_dim() {
                return Err(MofeError::Shape(format!(
                    "stream {i} width {} does not match projection input {}",
                    f.cols(),
                    p.input_dim()
                )));
            }
            if !f.is_finite() {
                return Err(MofeError::NonFinite("expert bundle"));
            }
        }
        Ok(())
    }
}

/// Keys and values of one attention stream, both `n × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair<T> {
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
}

/// Queries plus the context and image streams that exist without MoFE.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs<T> {
    pub q: Matrix<T>,
    pub ctx: KvPair<T>,
    pub img: KvPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs<T> {
    /// `e_id`, `e_sem`, `e_det`.
    pub outputs: [Matrix<T>; 3],
    pub(crate) caches: [ExpertCache<T>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateCache<T> {
    pub(crate) net: GateNetCache<T>,
    pub granularity: GateGranularity,
    pub logits: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache<T> {
    /// Row-softmax attention weights, `n_q × n_kv`.
    pub probs: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations<T> {
    pub block: usize,
    pub e_id: Matrix<T>,
    pub e_sem: Matrix<T>,
    pub e_det: Matrix<T>,
    /// Feature-axis concatenation `[e_id | e_sem | e_det]`.
    pub e_c: Matrix<T>,
    /// Gate weights, `n_tokens × 3`.
    pub w: Matrix<T>,
    pub f_fused: Matrix<T>,
    pub k_fused: Matrix<T>,
    pub v_fused: Matrix<T>,
    pub o: Matrix<T>,
    pub(crate) experts: [ExpertCache<T>; 3],
    pub(crate) gate: GateCache<T>,
    pub(crate) attn: [AttentionCache<T>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MofeForward<T> {
    /// Shared projections `P_attr(f_attr)`.
    pub projected: [Matrix<T>; 3],
    /// Injected blocks only, in block order.
    pub blocks: Vec<BlockActivations<T>>,
}

impl<T: Scalar> MofeForward<T> {
    pub fn block(&self, block: usize) -> Option<&BlockActivations<T>> {
        self.blocks.iter().find(|b| b.block == block)
    }
}

fn project<T: Scalar>(bundle: &ExpertBundle<T>, params: &MofeParams<T>) -> Result<[Matrix<T>; 3]> {
    bundle.check(params)?;
    let [a, b, c] = bundle.streams();
    Ok([
        params.projections[0].forward(a),
        params.projections[1].forward(b),
        params.projections[2].forward(c),
    ])
}

fn run_experts<T: Scalar>(projected: &[Matrix<T>; 3], block: &BlockParams<T>) -> ExpertOutputs<T> {
    let [(o0, c0), (o1, c1), (o2, c2)] = [0, 1, 2].map(|i| block.experts[i].forward(&projected[i]));
    ExpertOutputs {
        outputs: [o0, o1, o2],
        caches: [c0, c1, c2],
    }
}

/// `e_attr = E_attr(P_attr(f_attr))` for one injected block.
pub fn expert_forward<T: Scalar>(
    bundle: &ExpertBundle<T>,
    params: &MofeParams<T>,
    cfg: &MofeConfig,
    block: usize,
) -> Result<ExpertOutputs<T>> {
    if !cfg.is_injected(block) {
        return Err(MofeError::NotInjected {
            block,
            inject_every: cfg.inject_every,
        });
    }
    let block_params = params
        .block(block)
        .ok_or_else(|| MofeError::MissingActivations(format!("no parameters for block {block}")))?;
    let projected = project(bundle, params)?;
    Ok(run_experts(&projected, block_params))
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn gate_forward_cached<T: Scalar>(
    e_c: &Matrix<T>,
    gate: &Gate<T>,
    granularity: GateGranularity,
) -> Result<(Matrix<T>, GateCache<T>)> {
    if !e_c.is_finite() {
        return Err(MofeError::NonFinite("gate"));
    }
    let n = e_c.rows();
    let gate_input = match granularity {
        GateGranularity::PerToken => e_c.clone(),
        GateGranularity::PerStream => {
            let inv = T::one() / T::of(n as f64);
            let mean: Vec<T> = e_c.sum_rows().into_iter().map(|v| v * inv).collect();
            Matrix::from_vec(1, e_c.cols(), mean)
        }
    };
    let (logits, net) = gate.logits(&gate_input);
    let probs = softmax_rows(&logits);
    let w = match granularity {
        GateGranularity::PerToken => probs,
        GateGranularity::PerStream => Matrix::from_fn(n, 3, |_, c| probs[(0, c)]),
    };
    Ok((
        w,
        GateCache {
            net,
            granularity,
            logits,
        },
    ))
}

/// `w = Softmax(G(e_c))`, one row of three weights per token.
pub fn gate_forward<T: Scalar>(e_c: &Matrix<T>, gate: &Gate<T>, granularity: GateGranularity) -> Result<Matrix<T>> {
    gate_forward_cached(e_c, gate, granularity).map(|(w, _)| w)
}

/// `f[t] = w_id[t]·e_id[t] + w_sem[t]·e_sem[t] + w_det[t]·e_det[t]`.
pub fn fuse<T: Scalar>(w: &Matrix<T>, e_id: &Matrix<T>, e_sem: &Matrix<T>, e_det: &Matrix<T>) -> Result<Matrix<T>> {
    let shape = e_id.shape();
    if e_sem.shape() != shape || e_det.shape() != shape {
        return Err(MofeError::Shape("expert outputs differ in shape".into()));
    }
    if w.shape() != (shape.0, 3) {
        return Err(MofeError::Shape(format!(
            "gate weights {:?}, expected ({}, 3)",
            w.shape(),
            shape.0
        )));
    }
    Ok(Matrix::from_fn(shape.0, shape.1, |t, c| {
        w[(t, 0)] * e_id[(t, c)] + w[(t, 1)] * e_sem[(t, c)] + w[(t, 2)] * e_det[(t, c)]
    }))
}

fn check_kv<T: Scalar>(q: &Matrix<T>, kv: &KvPair<T>, name: &str) -> Result<()> {
    let d = q.cols();
    if kv.keys.cols() != d || kv.values.cols() != d {
        return Err(MofeError::Shape(format!("{name} keys/values must be {d} wide")));
    }
    if kv.keys.rows() != kv.values.rows() {
        return Err(MofeError::Shape(format!("{name} has unequal key and value counts")));
    }
    if kv.keys.rows() == 0 {
        return Err(MofeError::Shape(format!("{name} has no tokens")));
    }
    Ok(())
}

/// Single-head scaled dot-product attention, scale `1/√d`.
pub fn attention<T: Scalar>(q: &Matrix<T>, kv: &KvPair<T>) -> (Matrix<T>, AttentionCache<T>) {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let probs = softmax_rows(&q.matmul_t(&kv.keys).scale(scale));
    (probs.matmul(&kv.values), AttentionCache { probs })
}

/// Sum of three independent attentions over the context, image and fused streams.
pub fn facial_cross_attention<T: Scalar>(
    q: &Matrix<T>,
    ctx: &KvPair<T>,
    img: &KvPair<T>,
    fused: &KvPair<T>,
) -> Result<Matrix<T>> {
    facial_cross_attention_cached(q, [ctx, img, fused]).map(|(o, _)| o)
}

fn facial_cross_attention_cached<T: Scalar>(
    q: &Matrix<T>,
    streams: [&KvPair<T>; 3],
) -> Result<(Matrix<T>, [AttentionCache<T>; 3])> {
    for (kv, name) in streams.iter().zip(["ctx", "img", "fused"]) {
        check_kv(q, kv, name)?;
    }
    let [(o0, c0), (o1, c1), (o2, c2)] = streams.map(|kv| attention(q, kv));
    Ok((o0.add(&o1).add(&o2), [c0, c1, c2]))
}

fn block_forward<T: Scalar>(
    projected: &[Matrix<T>; 3],
    inputs: &AttentionInputs<T>,
    block: &BlockParams<T>,
    granularity: GateGranularity,
) -> Result<BlockActivations<T>> {
    let ExpertOutputs { outputs, caches } = run_experts(projected, block);
    let [e_id, e_sem, e_det] = outputs;
    let e_c = Matrix::hcat(&[&e_id, &e_sem, &e_det]);
    let (w, gate) = gate_forward_cached(&e_c, &block.gate, granularity)?;
    let f_fused = fuse(&w, &e_id, &e_sem, &e_det)?;
    let fused = KvPair {
        keys: block.w_k.forward(&f_fused),
        values: block.w_v.forward(&f_fused),
    };
    let (o, attn) = facial_cross_attention_cached(&inputs.q, [&inputs.ctx, &inputs.img, &fused])?;
    Ok(BlockActivations {
        block: block.block,
        e_id,
        e_sem,
        e_det,
        e_c,
        w,
        f_fused,
        k_fused: fused.keys,
        v_fused: fused.values,
        o,
        experts: caches,
        gate,
        attn,
    })
}

/// Runs every injected block. Non-injected blocks carry no facial stream
/// and produce no activations.
pub fn mofe_forward<T: Scalar>(
    bundle: &ExpertBundle<T>,
    inputs: &AttentionInputs<T>,
    params: &MofeParams<T>,
    cfg: &MofeConfig,
) -> Result<MofeForward<T>> {
    cfg.validate()?;
    if params.d_model() != cfg.d_model || inputs.q.cols() != cfg.d_model {
        return Err(MofeError::Shape(format!(
            "queries and parameters must be {} wide",
            cfg.d_model
        )));
    }
    let projected = project(bundle, params)?;
    let blocks = cfg
        .injected_blocks()
        .into_iter()
        .map(|b| {
            let block = params
                .block(b)
                .ok_or_else(|| MofeError::MissingActivations(format!("no parameters for block {b}")))?;
            block_forward(&projected, inputs, block, cfg.gate_granularity)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MofeForward { projected, blocks })
}
