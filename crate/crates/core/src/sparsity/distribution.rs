//! Non-uniform layer-wise sparsity allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SaliencyScores;
use crate::error::{Error, Result};
use crate::model::parse_block_path;

/// Outlier-weighted allocation: layers with more activation outliers keep
/// more weights.
///
/// `S^l = S − λ·(D^l − mean D) / max_l |D^l − mean D|`, so every `S^l` lies in
/// `[S − λ, S + λ]`, the extremes are hit exactly, and the mean is `S`.
/// With no spread in `D` every layer gets `S`.
pub fn owl_distribution(outlier_ratios: &[f64], target: f64, lambda: f64) -> Result<Vec<f64>> {
    if outlier_ratios.is_empty() {
        return Err(Error::usage("no layers to allocate"));
    }
    if let Some(d) = outlier_ratios.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::usage(format!("outlier ratio {d} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::usage(format!("target sparsity {target} outside [0, 1)")));
    }
    if lambda < 0.0 || (lambda > 0.0 && lambda >= target.min(1.0 - target)) {
        return Err(Error::usage(format!(
            "lambda {lambda} must satisfy 0 <= lambda < min(S, 1 - S) = {}",
            target.min(1.0 - target)
        )));
    }
    let n = outlier_ratios.len() as f64;
    let mean = outlier_ratios.iter().sum::<f64>() / n;
    let spread = outlier_ratios
        .iter()
        .map(|d| (d - mean).abs())
        .fold(0.0, f64::max);
    // Equal ratios can leave rounding-level spread in `D − mean`.
    let scale = outlier_ratios.iter().fold(0.0, |a: f64, d| a.max(d.abs()));
    if spread <= 16.0 * f64::EPSILON * scale || lambda == 0.0 {
        return Ok(vec![target; outlier_ratios.len()]);
    }
    Ok(outlier_ratios
        .iter()
        .map(|d| target - lambda * (d - mean) / spread)
        .collect())
}

/// Fraction of scores in each block strictly greater than `m` times that
/// block's mean score, pooling all of the block's matrices. Returned in block
/// order; blocks must be numbered `0..n` without gaps.
pub fn outlier_ratio(scores: &SaliencyScores, m: f64) -> Result<Vec<f64>> {
    if !(m > 0.0) {
        return Err(Error::usage(format!("outlier multiplier {m} must be positive")));
    }
    let mut blocks: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (path, t) in scores.iter() {
        let (b, _) = parse_block_path(path)
            .ok_or_else(|| Error::usage(format!("`{path}` is not a decoder-block matrix")))?;
        blocks.entry(b).or_default().push(t.data());
    }
    if blocks.is_empty() {
        return Err(Error::usage("empty score set"));
    }
    if blocks.keys().enumerate().any(|(i, &b)| i != b) {
        return Err(Error::usage("block indices are not contiguous from 0"));
    }
    blocks
        .values()
        .map(|mats| {
            let total: usize = mats.iter().map(|m| m.len()).sum();
            if total == 0 {
                return Err(Error::usage("empty score matrix"));
            }
            let mean = mats.iter().flat_map(|m| m.iter()).sum::<f64>() / total as f64;
            let threshold = m * mean;
            let outliers = mats
                .iter()
                .flat_map(|m| m.iter())
                .filter(|&&a| a > threshold)
                .count();
            Ok(outliers as f64 / total as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularForm {
    /// Densities scaled by the block count so their mean is `1 − S`
    /// (absent clamping), then clamped to `[0, 0.99]`.
    #[default]
    Rescaled,
    /// `S^i = 1 − (1 − S)·D^i / Σ|D^j|` exactly as written, whose mean
    /// density is `(1 − S)/n`.
    Literal,
}

/// Allocates density in proportion to each block's angular distance between
/// its input and output: blocks that change the residual stream more keep
/// more weights.
pub fn angular_distribution(distances: &[f64], target: f64, form: AngularForm) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::usage("no blocks to allocate"));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::usage("angular distances must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::usage(format!("target sparsity {target} outside [0, 1)")));
    }
    let total: f64 = distances.iter().map(|d| d.abs()).sum();
    if total == 0.0 {
        return Err(Error::usage("all angular distances are zero"));
    }
    let n = distances.len() as f64;
    Ok(distances
        .iter()
        .map(|d| match form {
            AngularForm::Rescaled => 1.0 - ((1.0 - target) * n * d / total).clamp(0.0, 0.99),
            AngularForm::Literal => 1.0 - (1.0 - target) * d / total,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::SaliencyMethod;
    use crate::tensor::Tensor;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn owl_examples() {
        assert_eq!(owl_distribution(&[0.1, 0.1, 0.1], 0.5, 0.08).unwrap(), vec![0.5; 3]);
        assert_eq!(owl_distribution(&[0.3, 0.1], 0.5, 0.0).unwrap(), vec![0.5; 2]);
        let s = owl_distribution(&[0.02, 0.01], 0.5, 0.08).unwrap();
        assert!((s[0] - 0.42).abs() < 1e-12 && (s[1] - 0.58).abs() < 1e-12);
        assert!((mean(&s) - 0.5).abs() < 1e-9);
        assert!(owl_distribution(&[0.1], 0.05, 0.08).is_err());
    }

    #[test]
    fn outlier_ratio_examples() {
        let mk = |data: &[f64]| {
            let mut m = BTreeMap::new();
            m.insert("blocks.0.attn.q".to_string(), Tensor::new(vec![data.len()], data.to_vec()).unwrap());
            SaliencyScores::from_map(SaliencyMethod::Magnitude, m).unwrap()
        };
        assert_eq!(outlier_ratio(&mk(&[2.0; 8]), 5.0).unwrap(), vec![0.0]);
        let s = mk(&[1.0, 1.0, 1.0, 97.0]);
        assert_eq!(outlier_ratio(&s, 5.0).unwrap(), vec![0.0]);
        assert_eq!(outlier_ratio(&s, 2.0).unwrap(), vec![0.25]);
        assert_eq!(outlier_ratio(&s.scaled(7.5), 2.0).unwrap(), vec![0.25]);
        assert!(outlier_ratio(&s, 0.0).is_err());
    }

    #[test]
    fn angular_examples() {
        assert_eq!(angular_distribution(&[0.2; 4], 0.5, AngularForm::Rescaled).unwrap(), vec![0.5; 4]);
        assert_eq!(angular_distribution(&[0.3], 0.6, AngularForm::Rescaled).unwrap(), vec![0.6]);
        assert_eq!(angular_distribution(&[0.3], 0.6, AngularForm::Literal).unwrap(), vec![0.6]);
        let s = angular_distribution(&[1.0, 3.0], 0.5, AngularForm::Rescaled).unwrap();
        assert_eq!(s, vec![0.75, 0.25]);
        let lit = angular_distribution(&[1.0, 3.0], 0.5, AngularForm::Literal).unwrap();
        assert_eq!(lit, vec![0.875, 0.625]);
        assert!(angular_distribution(&[0.0, 0.0], 0.5, AngularForm::Rescaled).is_err());
    }
}
