//! Weights-only per-token MAC model.
//!
//! Each linear layer costs `rows × cols` multiply-accumulates per token, the
//! embedding lookup costs nothing, the lm-head is always counted (tied or
//! not), and sequence-length-dependent attention-score work is left out.
//! A pruned matrix costs its dense MACs times `1 − sparsity`.

use serde::{Deserialize, Serialize};

use super::weights::{proj_path, Proj};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::sparsity::SparsityPlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentMacs {
    pub dense: u64,
    pub effective: f64,
}

impl ComponentMacs {
    fn add(&mut self, dense: u64, sparsity: f64) {
        self.dense += dense;
        self.effective += dense as f64 * (1.0 - sparsity);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    /// q, k, v and o projections of the surviving blocks.
    pub attention: ComponentMacs,
    /// gate, up and down projections of the surviving blocks.
    pub ffn: ComponentMacs,
    pub lm_head: ComponentMacs,
    /// Dense MACs of the counted model (sum of component `dense`).
    pub dense_total: u64,
    /// Sum of component `effective`.
    pub effective_total: f64,
    /// Dense MACs of the config before any block removal.
    pub reference_dense: u64,
    /// `1 − effective_total / reference_dense`.
    pub reduction_fraction: f64,
    pub blocks_counted: usize,
}

/// MACs per generated token for `config`, optionally under a sparsity plan
/// and with `pruned_blocks` decoder blocks removed.
///
/// With block removal, the plan (if any) must describe the surviving
/// `n_layers − pruned_blocks` blocks, renumbered from zero.
pub fn count_macs(
    config: &TransformerConfig,
    plan: Option<&SparsityPlan>,
    pruned_blocks: Option<usize>,
) -> Result<MacReport> {
    let removed = pruned_blocks.unwrap_or(0);
    if removed > config.n_layers {
        return Err(Error::usage(format!(
            "cannot remove {removed} of {} blocks",
            config.n_layers
        )));
    }
    let kept = config.n_layers - removed;
    if let Some(plan) = plan {
        let mut surviving = config.clone();
        surviving.n_layers = kept;
        plan.check_covers(&surviving)?;
    }

    let mut attention = ComponentMacs::default();
    let mut ffn = ComponentMacs::default();
    for b in 0..kept {
        for p in Proj::ALL {
            let (o, i) = p.shape(config);
            let dense = (o * i) as u64;
            let s = plan.map_or(0.0, |pl| pl.sparsity(&proj_path(b, p)).unwrap_or(0.0));
            if p.is_attention() {
                attention.add(dense, s);
            } else {
                ffn.add(dense, s);
            }
        }
    }
    let mut lm_head = ComponentMacs::default();
    lm_head.add((config.d_model * config.vocab_size) as u64, 0.0);

    let per_block: u64 = Proj::ALL
        .iter()
        .map(|p| {
            let (o, i) = p.shape(config);
            (o * i) as u64
        })
        .sum();
    let reference_dense = per_block * config.n_layers as u64 + lm_head.dense;
    let dense_total = attention.dense + ffn.dense + lm_head.dense;
    let effective_total = attention.effective + ffn.effective + lm_head.effective;
    Ok(MacReport {
        attention,
        ffn,
        lm_head,
        dense_total,
        effective_total,
        reference_dense,
        reduction_fraction: 1.0 - effective_total / reference_dense as f64,
        blocks_counted: kept,
    })
}
