use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetRecord, LabeledDataset, Provenance};
use super::vocab::EOS;
use super::{build_distill_prompt, render_prompt, TaskSample};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::scalar::Scalar;
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Take the argmax instead of sampling (the zero-temperature limit).
    #[serde(default)]
    pub greedy: bool,
    #[serde(default = "default_max_gen")]
    pub max_gen: usize,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    0.9
}

fn default_max_gen() -> usize {
    64
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: default_top_p(),
            temperature: default_temperature(),
            greedy: false,
            max_gen: default_max_gen(),
        }
    }
}

/// The nucleus distribution: logits scaled by `1/temperature` and
/// softmaxed, truncated to the smallest most-probable prefix whose mass
/// reaches `p`, renormalized. Sorted by probability, ties by lower id.
pub fn top_p_distribution(logits: &[f32], p: f64, temperature: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::usage(format!("top-p {p} outside (0, 1]")));
    }
    if !(temperature > 0.0) {
        return Err(Error::usage(format!("temperature {temperature} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::usage("empty logits row"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("sampling logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&s| (s - max).exp()).enumerate().collect();
    let total: f64 = probs.iter().map(|(_, q)| q).sum();
    probs.iter_mut().for_each(|(_, q)| *q /= total);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut kept = 0;
    let mut mass = 0.0;
    for (_, q) in &probs {
        kept += 1;
        mass += q;
        if mass >= p {
            break;
        }
    }
    probs.truncate(kept);
    probs.iter_mut().for_each(|(_, q)| *q /= mass);
    Ok(probs)
}

/// One draw from [`top_p_distribution`].
pub fn sample_top_p<R: Rng + ?Sized>(logits: &[f32], p: f64, temperature: f64, rng: &mut R) -> Result<usize> {
    let probs = top_p_distribution(logits, p, temperature)?;
    let draw = rng.gen::<f64>();
    let mut acc = 0.0;
    for &(id, q) in &probs {
        acc += q;
        if draw < acc {
            return Ok(id);
        }
    }
    Ok(probs[probs.len() - 1].0)
}

/// Samples a continuation of `context` until EOS (not included) or
/// `max_gen` tokens, stopping early at the model's context limit.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &Transformer<T>,
    context: &[usize],
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let max_seq = model.config.max_seq;
    if context.len() > max_seq {
        return Err(Error::SequenceOverflow {
            needed: context.len(),
            max_seq,
        });
    }
    let budget = sampler.max_gen.min(max_seq + 1 - context.len());
    let mut cache = model.new_cache();
    let mut out = Vec::new();
    let mut feed = context.to_vec();
    while out.len() < budget {
        let logits = model.forward(&feed, Some(&mut cache))?;
        let row: Vec<f32> = logits
            .row(logits.rows() - 1)
            .iter()
            .map(|x| x.to_f64_lossy() as f32)
            .collect();
        let next = if sampler.greedy {
            argmax(&row)
        } else {
            sample_top_p(&row, sampler.top_p, sampler.temperature, rng)?
        };
        if next == EOS {
            break;
        }
        out.push(next);
        feed = vec![next];
    }
    Ok(out)
}

/// Regenerates every label with the target itself, prompted with the
/// sample's context, input and original label. Outputs are kept as they
/// come, right or wrong, and stored against the bare input `X`.
///
/// Sample `i` draws from its own stream of `seed`, so results do not depend
/// on scheduling.
pub fn self_distill<T: Scalar>(
    target: &Transformer<T>,
    dataset: &[TaskSample],
    sampler: &SamplerConfig,
    seed: u64,
    target_id: &str,
) -> Result<LabeledDataset> {
    if dataset.is_empty() {
        return Err(Error::usage("nothing to distill"));
    }
    let records = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x_prime = build_distill_prompt(s, target.config.max_seq)?;
            let label = generate(target, &render_prompt(&x_prime), sampler, &mut rng)?;
            Ok(DatasetRecord {
                task: Some(s.task),
                prompt: s.prompt.clone(),
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        provenance: Provenance {
            source: "self_distilled".into(),
            target: Some(target_id.to_string()),
            sampler: Some(sampler.clone()),
            seed,
            ..Provenance::default()
        },
        records,
    })
}
