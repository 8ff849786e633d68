//! Mixture of facial experts: reference forward and backward passes.
//!
//! Three feature streams (identity, semantic, detail) are projected into a
//! shared width by globally shared projections. Every injected block refines
//! each stream with its own expert, computes softmax gate weights from the
//! concatenated expert outputs, and fuses them into one facial feature
//! `f = Σ w_a · e_a`. Keys and values projected from `f` form a third
//! cross-attention stream whose output is added to the context and image
//! streams: `o = attn(q, K_ctx, V_ctx) + attn(q, K_img, V_img) + attn(q, K_f, V_f)`.
//!
//! Everything here is generic over [`Scalar`](crate::Scalar); gradient checks
//! run at `f64`.

mod backward;
mod forward;
mod gradcheck;
mod layers;
mod matrix;
mod overhead;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::{mofe_backward, InputGrads, MofeGrads};
pub use forward::{
    attention, expert_forward, facial_cross_attention, fuse, gate_forward, mofe_forward, AttentionCache,
    AttentionInputs, BlockActivations, ExpertBundle, ExpertOutputs, GateCache, KvPair, MofeForward,
};
pub use gradcheck::{gradient_check, GradCheckReport, ToyProblem};
pub use layers::{gelu, gelu_grad, Expert, Gate, Linear};
pub use matrix::Matrix;
pub use overhead::{parameter_overhead, ParameterOverhead};
pub use params::{BlockParams, MofeParams};

#[derive(Debug, Error, PartialEq)]
pub enum MofeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("block {block} is not injected (inject_every = {inject_every})")]
    NotInjected { block: usize, inject_every: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("missing cached activations: {0}")]
    MissingActivations(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, MofeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// One affine map `3·d_model → 3`.
    #[default]
    Linear,
    /// Affine, GELU, affine with hidden width `d_model`.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    /// Separate weights for every token.
    #[default]
    PerToken,
    /// One weight vector per block from token-averaged expert outputs.
    PerStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MofeConfig {
    pub d_model: usize,
    pub n_tokens: usize,
    pub d_id: usize,
    pub d_sem: usize,
    pub d_det: usize,
    pub n_blocks: usize,
    pub inject_every: usize,
    pub gate_kind: GateKind,
    pub gate_granularity: GateGranularity,
    pub expert_hidden: usize,
    pub seed: u64,
}

impl Default for MofeConfig {
    /// Width and depth of a 1.3B-parameter video DiT (1536 wide, 30 blocks);
    /// encoder widths are placeholders.
    fn default() -> Self {
        Self {
            d_model: 1536,
            n_tokens: 4,
            d_id: 512,
            d_sem: 768,
            d_det: 768,
            n_blocks: 30,
            inject_every: 2,
            gate_kind: GateKind::Linear,
            gate_granularity: GateGranularity::PerToken,
            expert_hidden: 3072,
            seed: 0,
        }
    }
}

impl MofeConfig {
    /// Small configuration for numeric checks.
    pub fn toy(d_model: usize, n_tokens: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_tokens,
            d_id: d_model + 1,
            d_sem: d_model + 2,
            d_det: d_model + 3,
            n_blocks: 4,
            inject_every: 2,
            gate_kind: GateKind::Linear,
            gate_granularity: GateGranularity::PerToken,
            expert_hidden: 2 * d_model,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_model", self.d_model),
            ("n_tokens", self.n_tokens),
            ("d_id", self.d_id),
            ("d_sem", self.d_sem),
            ("d_det", self.d_det),
            ("n_blocks", self.n_blocks),
            ("inject_every", self.inject_every),
            ("expert_hidden", self.expert_hidden),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(MofeError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn input_widths(&self) -> [usize; 3] {
        [self.d_id, self.d_sem, self.d_det]
    }

    pub fn is_injected(&self, block: usize) -> bool {
        block < self.n_blocks && block.is_multiple_of(self.inject_every)
    }

    /// Blocks `0, inject_every, 2·inject_every, ...` below `n_blocks`.
    pub fn injected_blocks(&self) -> Vec<usize> {
        (0..self.n_blocks).step_by(self.inject_every.max(1)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injection_layout() {
        let cfg = MofeConfig {
            n_blocks: 30,
            inject_every: 2,
            ..Default::default()
        };
        assert_eq!(cfg.injected_blocks().len(), 15);
        let cfg = MofeConfig {
            n_blocks: 4,
            inject_every: 2,
            ..Default::default()
        };
        assert_eq!(cfg.injected_blocks(), vec![0, 2]);
        assert!(!cfg.is_injected(1));
        let every = MofeConfig {
            inject_every: 1,
            ..cfg.clone()
        };
        assert_eq!(every.injected_blocks(), vec![0, 1, 2, 3]);
        for n_blocks in 1..20 {
            for inject_every in 1..6 {
                let c = MofeConfig {
                    n_blocks,
                    inject_every,
                    ..Default::default()
                };
                assert_eq!(c.injected_blocks().len(), n_blocks.div_ceil(inject_every));
            }
        }
    }
}
