use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{floor_count, Bitmap, SparsityMask, SparsityPattern, SparsityPlan};
use crate::error::{Error, Result};
use crate::model::{ModelWeights, Probe, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    /// `|W_ij|`
    Magnitude,
    /// `‖X_j‖ · |W_ij|`, with `‖X_j‖` the norm of input feature `j` over
    /// all calibration tokens.
    ActivationWeighted,
}

/// Per-matrix importance scores, same shape as the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyScores {
    pub method: SaliencyMethod,
    scores: BTreeMap<String, Tensor<f64>>,
}

impl SaliencyScores {
    pub fn from_map(method: SaliencyMethod, scores: BTreeMap<String, Tensor<f64>>) -> Result<Self> {
        for (p, t) in &scores {
            if t.data().iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::usage(format!(
                    "scores for `{p}` must be finite and non-negative"
                )));
            }
        }
        Ok(Self { method, scores })
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<f64>> {
        self.scores
            .get(path)
            .ok_or_else(|| Error::shape(format!("no saliency scores for `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        self.scores.iter()
    }

    /// Multiplies every score by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            method: self.method,
            scores: self
                .scores
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|s| s * factor)))
                .collect(),
        }
    }
}

/// Saliency of the matrices at `scope`. `calibration` maps each path to its
/// per-input-column activation norms and is required for
/// [`SaliencyMethod::ActivationWeighted`].
pub fn compute_saliency<T: Scalar>(
    weights: &ModelWeights<T>,
    method: SaliencyMethod,
    calibration: Option<&BTreeMap<String, Vec<f64>>>,
    scope: &[String],
) -> Result<SaliencyScores> {
    let mut scores = BTreeMap::new();
    for path in scope {
        let w = weights.get(path)?;
        let cols = w.cols();
        let data: Vec<f64> = match method {
            SaliencyMethod::Magnitude => w.data().iter().map(|x| x.to_f64_lossy().abs()).collect(),
            SaliencyMethod::ActivationWeighted => {
                let norms = calibration
                    .and_then(|c| c.get(path))
                    .ok_or_else(|| {
                        Error::usage(format!("activation-weighted saliency needs calibration norms for `{path}`"))
                    })?;
                if norms.len() != cols {
                    return Err(Error::shape(format!(
                        "`{path}` has {cols} inputs but {} calibration norms",
                        norms.len()
                    )));
                }
                w.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| norms[i % cols] * x.to_f64_lossy().abs())
                    .collect()
            }
        };
        scores.insert(path.clone(), Tensor::new(w.shape().to_vec(), data)?);
    }
    SaliencyScores::from_map(method, scores)
}

/// Runs `prompts` through `model` and returns, for every projection, the L2
/// norm of each input feature over all calibration tokens.
pub fn collect_input_norms<T: Scalar>(
    model: &Transformer<T>,
    prompts: &[Vec<usize>],
) -> Result<BTreeMap<String, Vec<f64>>> {
    if prompts.is_empty() {
        return Err(Error::usage("calibration set is empty"));
    }
    #[derive(Default)]
    struct SumSquares(BTreeMap<String, Vec<f64>>);
    impl<T: Scalar> Probe<T> for SumSquares {
        fn linear_input(&mut self, path: &str, input: &Tensor<T>) {
            let acc = self
                .0
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; input.cols()]);
            for r in 0..input.rows() {
                for (a, x) in acc.iter_mut().zip(input.row(r)) {
                    let x = x.to_f64_lossy();
                    *a += x * x;
                }
            }
        }
    }
    let mut probe = SumSquares::default();
    for p in prompts {
        model.forward_probed(p, &mut model.new_cache(), Some(&mut probe))?;
    }
    Ok(probe
        .0
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
        .collect())
}

/// Indices of `scores` in pruning order: lowest score first, ties broken by
/// lowest index.
fn prune_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Per matrix in the plan, masks the `⌊s·numel⌋` lowest-scoring weights.
pub fn prune_unstructured(scores: &SaliencyScores, plan: &SparsityPlan) -> Result<SparsityMask> {
    if plan.pattern() != SparsityPattern::Unstructured {
        return Err(Error::usage("prune_unstructured needs an unstructured plan"));
    }
    let mut mask = SparsityMask::new();
    for (path, &s) in plan.targets() {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::usage(format!("sparsity {s} outside [0, 1)")));
        }
        let sc = scores.get(path)?;
        let n_prune = floor_count(s, sc.numel());
        let mut bits = vec![true; sc.numel()];
        for &i in prune_order(sc.data()).iter().take(n_prune) {
            bits[i] = false;
        }
        mask.insert(path.clone(), Bitmap::from_bits(sc.shape(), bits)?);
    }
    Ok(mask)
}

/// In every contiguous group of four along the input (last) axis, masks the
/// two lowest-scoring weights. Applies to every matrix in `scores`.
pub fn prune_two_four(scores: &SaliencyScores) -> Result<SparsityMask> {
    let mut mask = SparsityMask::new();
    for (path, sc) in scores.iter() {
        if sc.cols() % 4 != 0 {
            return Err(Error::shape(format!(
                "2:4 pruning of `{path}` needs an input dimension divisible by 4, got {}",
                sc.cols()
            )));
        }
        let mut bits = vec![true; sc.numel()];
        for (g, group) in sc.data().chunks_exact(4).enumerate() {
            for &i in prune_order(group).iter().take(2) {
                bits[g * 4 + i] = false;
            }
        }
        mask.insert(path.clone(), Bitmap::from_bits(sc.shape(), bits)?);
    }
    Ok(mask)
}

/// Dispatches on the plan's pattern; 2:4 prunes exactly the plan's matrices.
pub fn prune_mask(scores: &SaliencyScores, plan: &SparsityPlan) -> Result<SparsityMask> {
    match plan.pattern() {
        SparsityPattern::Unstructured => prune_unstructured(scores, plan),
        SparsityPattern::TwoFour => {
            let subset = plan
                .scope()
                .map(|p| Ok((p.clone(), scores.get(p)?.clone())))
                .collect::<Result<BTreeMap<_, _>>>()?;
            prune_two_four(&SaliencyScores::from_map(scores.method, subset)?)
        }
    }
}
