//! Layer-pruned baselines: pick the contiguous run of decoder blocks whose
//! removal changes the residual stream least, then cut it out.
//!
//! Block indices are zero-based: group `(start, n)` covers blocks
//! `start..start + n`, whose input is `x[start]` and output `x[start + n]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parse_block_path, Transformer};
use crate::scalar::Scalar;

/// `arccos(cos∠(u, v)) / π`, in `[0, 1]`.
pub fn angular_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "angular distance between lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::usage("angular distance of a zero vector"));
    }
    let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGroupScore {
    pub start: usize,
    pub len: usize,
    /// Mean over calibration sequences of the last-token distance.
    pub distance: f64,
}

/// Scores every group of `n` consecutive blocks.
pub fn score_block_groups<T: Scalar>(
    model: &Transformer<T>,
    calibration: &[Vec<usize>],
    n: usize,
) -> Result<Vec<BlockGroupScore>> {
    let depth = model.depth();
    if n == 0 || n >= depth {
        return Err(Error::usage(format!(
            "group length must satisfy 1 <= n < {depth}, got {n}"
        )));
    }
    if calibration.is_empty() {
        return Err(Error::usage("calibration set is empty"));
    }
    let mut sums = vec![0.0; depth - n + 1];
    for seq in calibration {
        let states: Vec<Vec<f64>> = model
            .capture_block_inputs(seq)?
            .into_iter()
            .map(|x| x.into_iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        for (i, s) in sums.iter_mut().enumerate() {
            *s += angular_distance(&states[i], &states[i + n])?;
        }
    }
    let count = calibration.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(start, s)| BlockGroupScore {
            start,
            len: n,
            distance: s / count,
        })
        .collect())
}

/// Start of the `n`-block group with the smallest mean angular distance;
/// ties go to the earliest group.
pub fn select_block_group<T: Scalar>(
    model: &Transformer<T>,
    calibration: &[Vec<usize>],
    n: usize,
) -> Result<BlockGroupScore> {
    let scores = score_block_groups(model, calibration, n)?;
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.distance < best.distance {
            best = *s;
        }
    }
    Ok(best)
}

/// Deletes blocks `start..start + n`, renumbering the survivors so block
/// `start + n` becomes block `start`.
pub fn remove_blocks<T: Scalar>(model: &Transformer<T>, start: usize, n: usize) -> Result<Transformer<T>> {
    let depth = model.depth();
    if start + n > depth {
        return Err(Error::usage(format!(
            "block group {start}..{} is outside a {depth}-block model",
            start + n
        )));
    }
    let mut config = model.config.clone();
    config.n_layers = depth - n;
    let mut tensors = BTreeMap::new();
    for (path, t) in model.weights.iter() {
        match parse_block_path(path) {
            Some((b, _)) if (start..start + n).contains(&b) => {}
            Some((b, tail)) if b >= start + n => {
                tensors.insert(format!("blocks.{}.{tail}", b - n), t.clone());
            }
            _ => {
                tensors.insert(path.clone(), t.clone());
            }
        }
    }
    Transformer::new(config, crate::model::ModelWeights::from_map(tensors))
}

/// Block count removed by the "50% layer-pruned" baseline.
pub fn half_depth(n_layers: usize) -> usize {
    n_layers / 2
}
