//! Fine-grained pruning: saliency, one-shot masks (unstructured and 2:4),
//! mask application, sparsity measurement, and layer-wise distributions.

mod distribution;
mod prune;

pub use distribution::{angular_distribution, outlier_ratio, owl_distribution, AngularForm};
pub use prune::{
    collect_input_norms, compute_saliency, prune_mask, prune_two_four, prune_unstructured,
    SaliencyMethod, SaliencyScores,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parse_block_path, prunable_paths, ModelWeights, Proj, TransformerConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPattern {
    Unstructured,
    TwoFour,
}

/// Per-matrix target sparsity over decoder-block projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pattern: SparsityPattern,
    targets: BTreeMap<String, f64>,
}

/// `⌊s·n⌋` without losing a unit to binary rounding of `s`
/// (`0.29 · 100` must give 29).
pub(crate) fn floor_count(s: f64, n: usize) -> usize {
    let nf = n as f64;
    let k = (s * nf).floor();
    let k = if (k + 1.0) / nf <= s { k + 1.0 } else { k };
    (k.max(0.0) as usize).min(n)
}

impl SparsityPlan {
    /// Validates that every path is a decoder projection and every target
    /// lies in `[0, 1)`; 2:4 plans must be exactly 0.5 everywhere.
    pub fn from_targets(pattern: SparsityPattern, targets: BTreeMap<String, f64>) -> Result<Self> {
        for (path, &s) in &targets {
            let is_proj = parse_block_path(path)
                .is_some_and(|(_, tail)| Proj::ALL.iter().any(|p| p.name() == tail));
            if !is_proj {
                return Err(Error::usage(format!(
                    "`{path}` is not a prunable decoder projection"
                )));
            }
            if !(0.0..1.0).contains(&s) {
                return Err(Error::usage(format!(
                    "sparsity {s} for `{path}` outside [0, 1)"
                )));
            }
            if pattern == SparsityPattern::TwoFour && s != 0.5 {
                return Err(Error::usage("2:4 plans have sparsity 0.5 on every matrix"));
            }
        }
        Ok(Self { pattern, targets })
    }

    /// Same sparsity on every projection of every block. 2:4 always means 0.5.
    pub fn uniform(c: &TransformerConfig, sparsity: f64, pattern: SparsityPattern) -> Result<Self> {
        let s = match pattern {
            SparsityPattern::TwoFour => 0.5,
            SparsityPattern::Unstructured => sparsity,
        };
        let targets = prunable_paths(c).into_iter().map(|p| (p, s)).collect();
        Self::from_targets(pattern, targets)
    }

    /// One sparsity per block, applied to all of that block's projections.
    pub fn per_block(
        c: &TransformerConfig,
        block_sparsity: &[f64],
        pattern: SparsityPattern,
    ) -> Result<Self> {
        if block_sparsity.len() != c.n_layers {
            return Err(Error::usage(format!(
                "{} block sparsities for {} blocks",
                block_sparsity.len(),
                c.n_layers
            )));
        }
        let targets = prunable_paths(c)
            .into_iter()
            .map(|p| {
                let (b, _) = parse_block_path(&p).expect("prunable path");
                (p, block_sparsity[b])
            })
            .collect();
        Self::from_targets(pattern, targets)
    }

    /// Plan describing the zeros actually present in `weights`.
    pub fn measured<T: Scalar>(c: &TransformerConfig, weights: &ModelWeights<T>) -> Result<Self> {
        let scope = prunable_paths(c);
        let report = measure_weight_sparsity(weights, &scope)?;
        let mut targets = report.per_matrix;
        // A fully zeroed matrix is representable here even though plans cap at <1.
        for s in targets.values_mut() {
            *s = s.min(1.0 - f64::EPSILON);
        }
        Ok(Self {
            pattern: SparsityPattern::Unstructured,
            targets,
        })
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn sparsity(&self, path: &str) -> Option<f64> {
        self.targets.get(path).copied()
    }

    pub fn scope(&self) -> impl Iterator<Item = &String> {
        self.targets.keys()
    }

    pub fn targets(&self) -> &BTreeMap<String, f64> {
        &self.targets
    }

    /// The plan must name exactly the prunable matrices of `c`.
    pub fn check_covers(&self, c: &TransformerConfig) -> Result<()> {
        let want: BTreeSet<String> = prunable_paths(c).into_iter().collect();
        let have: BTreeSet<&String> = self.targets.keys().collect();
        if let Some(missing) = want.iter().find(|p| !have.contains(p)) {
            return Err(Error::shape(format!("plan does not cover `{missing}`")));
        }
        if let Some(extra) = have.iter().find(|p| !want.contains(**p)) {
            return Err(Error::shape(format!("plan names unknown matrix `{extra}`")));
        }
        Ok(())
    }
}

/// Keep/prune bits for one matrix; `true` keeps the weight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitmap {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(format!(
                "bitmap of {} bits for shape {shape:?}",
                bits.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn pruned(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.pruned() as f64 / self.bits.len() as f64
    }

    /// One bit per weight, least significant bit first, padded to a byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::shape(format!(
                "{} mask bytes for {n} weights",
                bytes.len()
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::from_bits(shape, bits)
    }
}

/// Keep/prune bitmaps keyed by weight path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    masks: BTreeMap<String, Bitmap>,
}

impl SparsityMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: String, bitmap: Bitmap) {
        self.masks.insert(path, bitmap);
    }

    pub fn get(&self, path: &str) -> Option<&Bitmap> {
        self.masks.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Bitmap)> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// All-ones masks for the given paths of `weights`.
    pub fn all_ones<T: Scalar>(weights: &ModelWeights<T>, paths: &[String]) -> Result<Self> {
        let mut m = Self::new();
        for p in paths {
            m.insert(p.clone(), Bitmap::ones(weights.get(p)?.shape()));
        }
        Ok(m)
    }

    /// Mask whose zeros are exactly the zero weights at `paths`.
    pub fn from_zeros<T: Scalar>(weights: &ModelWeights<T>, paths: &[String]) -> Result<Self> {
        let mut m = Self::new();
        for p in paths {
            let t = weights.get(p)?;
            let bits = t.data().iter().map(|x| !x.is_zero()).collect();
            m.insert(p.clone(), Bitmap::from_bits(t.shape(), bits)?);
        }
        Ok(m)
    }

    /// Checks every mask names an existing weight of identical shape.
    pub fn check_against<T: Scalar>(&self, weights: &ModelWeights<T>) -> Result<()> {
        for (path, bm) in &self.masks {
            let w = weights.get(path)?;
            if w.shape() != bm.shape() {
                return Err(Error::shape(format!(
                    "mask for `{path}` has shape {:?}, weight has {:?}",
                    bm.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Sets every masked weight to exactly zero; unmasked weights are untouched.
pub fn apply_mask<T: Scalar>(weights: &mut ModelWeights<T>, mask: &SparsityMask) -> Result<()> {
    mask.check_against(weights)?;
    for (path, bm) in mask.iter() {
        let w = weights.get_mut(path)?;
        for (x, &keep) in w.data_mut().iter_mut().zip(bm.bits()) {
            if !keep {
                *x = T::zero();
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_matrix: BTreeMap<String, f64>,
    pub zeros: usize,
    pub total: usize,
    /// Total zeros over total elements of the scope.
    pub aggregate: f64,
}

fn report(per: BTreeMap<String, (usize, usize)>) -> Result<SparsityReport> {
    if per.is_empty() {
        return Err(Error::usage("sparsity scope is empty"));
    }
    let zeros = per.values().map(|v| v.0).sum();
    let total: usize = per.values().map(|v| v.1).sum();
    Ok(SparsityReport {
        per_matrix: per
            .into_iter()
            .map(|(k, (z, n))| (k, z as f64 / n as f64))
            .collect(),
        zeros,
        total,
        aggregate: zeros as f64 / total as f64,
    })
}

/// Zero fractions of the weights at `scope`.
pub fn measure_weight_sparsity<T: Scalar>(
    weights: &ModelWeights<T>,
    scope: &[String],
) -> Result<SparsityReport> {
    let mut per = BTreeMap::new();
    for p in scope {
        let t = weights.get(p)?;
        per.insert(p.clone(), (t.count_zeros(), t.numel()));
    }
    report(per)
}

/// Pruned fractions of the masks at `scope` (all masks when `None`).
pub fn measure_mask_sparsity(mask: &SparsityMask, scope: Option<&[String]>) -> Result<SparsityReport> {
    let mut per = BTreeMap::new();
    match scope {
        Some(paths) => {
            for p in paths {
                let bm = mask
                    .get(p)
                    .ok_or_else(|| Error::shape(format!("no mask for `{p}`")))?;
                per.insert(p.clone(), (bm.pruned(), bm.len()));
            }
        }
        None => {
            for (p, bm) in mask.iter() {
                per.insert(p.clone(), (bm.pruned(), bm.len()));
            }
        }
    }
    report(per)
}
