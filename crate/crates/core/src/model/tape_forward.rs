use std::collections::BTreeMap;

use super::weights::{attn_norm_path, mlp_norm_path, proj_path, Proj, EMBED, FINAL_NORM, LM_HEAD};
use super::{ModelWeights, TransformerConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradTape, Var};

/// Binds every weight as a tape parameter under its path.
pub fn bind_params<T: Scalar>(
    tape: &mut GradTape<T>,
    weights: &ModelWeights<T>,
) -> Result<BTreeMap<String, Var>> {
    weights
        .iter()
        .map(|(path, t)| Ok((path.clone(), tape.param(path, t.clone())?)))
        .collect()
}

/// Full-sequence forward recorded on `tape`; returns logits `[len × vocab]`.
///
/// Same architecture as [`super::Transformer::forward`], built from tape
/// primitives so every weight receives a gradient.
pub fn forward_on_tape<T: Scalar>(
    c: &TransformerConfig,
    tape: &mut GradTape<T>,
    params: &BTreeMap<String, Var>,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.len() > c.max_seq {
        return Err(Error::SequenceOverflow {
            needed: tokens.len(),
            max_seq: c.max_seq,
        });
    }
    let p = |path: &str| {
        params
            .get(path)
            .copied()
            .ok_or_else(|| Error::shape(format!("parameter `{path}` not bound")))
    };
    let eps = T::c(c.norm_eps);
    let dh = c.d_head;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut x = tape.embedding(p(EMBED)?, tokens)?;

    for b in 0..c.n_layers {
        let h = tape.rms_norm(x, p(&attn_norm_path(b))?, eps)?;
        let q = tape.linear(h, p(&proj_path(b, Proj::Q))?)?;
        let k = tape.linear(h, p(&proj_path(b, Proj::K))?)?;
        let v = tape.linear(h, p(&proj_path(b, Proj::V))?)?;
        let q = tape.rope(q, dh, 0, c.rope_base)?;
        let k = tape.rope(k, dh, 0, c.rope_base)?;

        let mut kv_heads = Vec::with_capacity(c.n_kv_heads);
        for g in 0..c.n_kv_heads {
            let kg = tape.slice_cols(k, g * dh, dh)?;
            let vg = tape.slice_cols(v, g * dh, dh)?;
            kv_heads.push((kg, vg));
        }
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let (kg, vg) = kv_heads[h / c.group_size()];
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let scores = tape.linear(qh, kg)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.causal_mask(scores, 0)?;
            let probs = tape.row_softmax(scores)?;
            heads.push(tape.matmul(probs, vg)?);
        }
        let attn = tape.concat_cols(&heads)?;
        let o = tape.linear(attn, p(&proj_path(b, Proj::O))?)?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, p(&mlp_norm_path(b))?, eps)?;
        let gate = tape.linear(h, p(&proj_path(b, Proj::Gate))?)?;
        let up = tape.linear(h, p(&proj_path(b, Proj::Up))?)?;
        let act = tape.silu(gate)?;
        let act = tape.mul(act, up)?;
        let down = tape.linear(act, p(&proj_path(b, Proj::Down))?)?;
        x = tape.add(x, down)?;
    }
    let h = tape.rms_norm(x, p(FINAL_NORM)?, eps)?;
    let head = if c.tie_embeddings { p(EMBED)? } else { p(LM_HEAD)? };
    tape.linear(h, head)
}
