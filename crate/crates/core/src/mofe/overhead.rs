use serde::{Deserialize, Serialize};

use super::{GateKind, MofeConfig, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterOverhead {
    /// Shared projections, counted once.
    pub shared: u64,
    /// Experts, gate and fused key/value projections of one injected block.
    pub per_block: u64,
    pub injected_blocks: usize,
    pub mofe_params: u64,
    pub base_params: u64,
    /// `mofe_params / base_params`.
    pub ratio: f64,
}

fn linear(input: usize, output: usize) -> u64 {
    (input * output + output) as u64
}

/// Counts added parameters analytically; nothing is allocated, so full-size
/// configurations are cheap to evaluate.
pub fn parameter_overhead(cfg: &MofeConfig, base_params: u64) -> Result<ParameterOverhead> {
    cfg.validate()?;
    if base_params == 0 {
        return Err(super::MofeError::InvalidConfig("base_params must be >= 1".into()));
    }
    let d = cfg.d_model;
    let h = cfg.expert_hidden;
    let shared = cfg.input_widths().iter().map(|&w| linear(w, d)).sum();
    let expert = linear(d, h) + linear(h, d);
    let gate = match cfg.gate_kind {
        GateKind::Linear => linear(3 * d, 3),
        GateKind::Mlp => linear(3 * d, d) + linear(d, 3),
    };
    let per_block = 3 * expert + gate + 2 * linear(d, d);
    let injected_blocks = cfg.injected_blocks().len();
    let mofe_params = shared + per_block * injected_blocks as u64;
    Ok(ParameterOverhead {
        shared,
        per_block,
        injected_blocks,
        mofe_params,
        base_params,
        ratio: mofe_params as f64 / base_params as f64,
    })
}
