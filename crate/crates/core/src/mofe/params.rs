use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Expert, Gate, Linear};
use super::{GateKind, MofeConfig, Result};
use crate::scalar::Scalar;

pub(crate) const STREAMS: [&str; 3] = ["id", "sem", "det"];

/// Parameters owned by one injected block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub block: usize,
    /// Identity, semantic and detail experts.
    pub experts: [Expert<T>; 3],
    pub gate: Gate<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum::<usize>()
            + self.gate.param_count()
            + self.w_k.param_count()
            + self.w_v.param_count()
    }

    fn zeros_like(&self) -> Self {
        let zero_expert = |e: &Expert<T>| Expert::zeros(e.fc1.input_dim(), e.fc1.output_dim());
        Self {
            block: self.block,
            experts: [
                zero_expert(&self.experts[0]),
                zero_expert(&self.experts[1]),
                zero_expert(&self.experts[2]),
            ],
            gate: self.gate.zeros_like(),
            w_k: Linear::zeros(self.w_k.input_dim(), self.w_k.output_dim()),
            w_v: Linear::zeros(self.w_v.input_dim(), self.w_v.output_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MofeParams<T> {
    /// Shared projections `P_id`, `P_sem`, `P_det` into `d_model`.
    pub projections: [Linear<T>; 3],
    /// One entry per injected block, in block order.
    pub blocks: Vec<BlockParams<T>>,
}

impl<T: Scalar> MofeParams<T> {
    /// Uniform `±1/√fan_in` initialization driven by `cfg.seed`.
    pub fn init(cfg: &MofeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let [d_id, d_sem, d_det] = cfg.input_widths();
        let projections = [
            Linear::init(d_id, d, &mut rng),
            Linear::init(d_sem, d, &mut rng),
            Linear::init(d_det, d, &mut rng),
        ];
        let blocks = cfg
            .injected_blocks()
            .into_iter()
            .map(|block| BlockParams {
                block,
                experts: [
                    Expert::init(d, cfg.expert_hidden, &mut rng),
                    Expert::init(d, cfg.expert_hidden, &mut rng),
                    Expert::init(d, cfg.expert_hidden, &mut rng),
                ],
                gate: match cfg.gate_kind {
                    GateKind::Linear => Gate::Linear(Linear::init(3 * d, 3, &mut rng)),
                    GateKind::Mlp => Gate::Mlp {
                        fc1: Linear::init(3 * d, d, &mut rng),
                        fc2: Linear::init(d, 3, &mut rng),
                    },
                },
                w_k: Linear::init(d, d, &mut rng),
                w_v: Linear::init(d, d, &mut rng),
            })
            .collect();
        Ok(Self { projections, blocks })
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |l: &Linear<T>| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            projections: [
                zero(&self.projections[0]),
                zero(&self.projections[1]),
                zero(&self.projections[2]),
            ],
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
        }
    }

    pub fn block(&self, block: usize) -> Option<&BlockParams<T>> {
        self.blocks.iter().find(|b| b.block == block)
    }

    pub fn d_model(&self) -> usize {
        self.projections[0].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.projections.iter().map(Linear::param_count).sum::<usize>()
            + self.blocks.iter().map(BlockParams::param_count).sum::<usize>()
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (name, p) in STREAMS.iter().zip(&self.projections) {
            let [w, b] = p.tensors();
            out.push((format!("proj_{name}.weight"), w));
            out.push((format!("proj_{name}.bias"), b));
        }
        for blk in &self.blocks {
            let i = blk.block;
            for (name, e) in STREAMS.iter().zip(&blk.experts) {
                for (layer, l) in [("fc1", &e.fc1), ("fc2", &e.fc2)] {
                    let [w, b] = l.tensors();
                    out.push((format!("block{i}.expert_{name}.{layer}.weight"), w));
                    out.push((format!("block{i}.expert_{name}.{layer}.bias"), b));
                }
            }
            for (j, t) in blk.gate.tensors().into_iter().enumerate() {
                out.push((format!("block{i}.gate.{j}"), t));
            }
            for (name, l) in [("w_k", &blk.w_k), ("w_v", &blk.w_v)] {
                let [w, b] = l.tensors();
                out.push((format!("block{i}.{name}.weight"), w));
                out.push((format!("block{i}.{name}.bias"), b));
            }
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for p in &mut self.projections {
            out.extend(p.tensors_mut());
        }
        for blk in &mut self.blocks {
            for e in &mut blk.experts {
                out.extend(e.fc1.tensors_mut());
                out.extend(e.fc2.tensors_mut());
            }
            out.extend(blk.gate.tensors_mut());
            out.extend(blk.w_k.tensors_mut());
            out.extend(blk.w_v.tensors_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_counted() {
        let cfg = MofeConfig::toy(4, 2, 3);
        let a = MofeParams::<f64>::init(&cfg).unwrap();
        assert_eq!(a, MofeParams::<f64>::init(&cfg).unwrap());
        assert_eq!(a.blocks.len(), 2);
        let listed: usize = a.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(listed, a.param_count());
        let mut b = a.clone();
        assert_eq!(b.tensors_mut().len(), a.tensors().len());
        let bound = 1.0 / 4f64.sqrt();
        assert!(a.blocks[0].w_k.weight.as_slice().iter().all(|v| v.abs() <= bound));
    }
}
