//! Synthetic fine-tuning tasks and self-data distillation.
//!
//! Every sequence the models see is rendered as
//! `[BOS] prompt [SEP] label [EOS]`; generation starts after the `[SEP]`.

mod dataset;
mod sampler;
pub mod vocab;

pub use dataset::{interleave, DatasetRecord, LabeledDataset, Provenance};
pub use sampler::{generate, sample_top_p, self_distill, top_p_distribution, SamplerConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use vocab::{digit, letter, ADD, BOS, COPY, EOS, EQ, MAP, PLUS, SEP, SUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Repeat the prompt's letters.
    Copy,
    /// `a + b` with `a, b < 50`, answered in decimal digits.
    Arithmetic,
    /// Apply a fixed letter substitution; the context shows a few examples.
    Mapping,
    /// Collapse runs of repeated letters.
    Summary,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Arithmetic,
        TaskKind::Mapping,
        TaskKind::Summary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Arithmetic => "arithmetic",
            TaskKind::Mapping => "mapping",
            TaskKind::Summary => "summary",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown task tag `{s}`")))
    }
}

/// How labels are written.
///
/// `Canonical` is what the target is pretrained to produce. `Reference`
/// mimics an annotated dataset whose conventions differ from the target's
/// own outputs: sums are zero-padded to three digits and summaries list the
/// distinct letters in alphabetical order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    #[default]
    Canonical,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: TaskKind,
    /// May be empty.
    pub context: Vec<usize>,
    pub prompt: Vec<usize>,
    pub label: Vec<usize>,
}

impl TaskSample {
    /// The label this sample's prompt implies under `style`.
    pub fn label_in(&self, style: LabelStyle) -> Vec<usize> {
        solve(self.task, &self.prompt, style)
    }
}

/// Letter substitution used by the mapping task.
pub fn map_letter(i: usize) -> usize {
    (7 * i + 3) % vocab::N_LETTERS
}

fn digits_of(n: usize, width: usize) -> Vec<usize> {
    format!("{n:0width$}")
        .bytes()
        .map(|b| digit((b - b'0') as usize))
        .collect()
}

fn parse_digits(tokens: &[usize]) -> usize {
    tokens
        .iter()
        .fold(0, |acc, &t| acc * 10 + vocab::digit_value(t).unwrap_or(0))
}

fn solve(task: TaskKind, prompt: &[usize], style: LabelStyle) -> Vec<usize> {
    let body = &prompt[1..];
    match task {
        TaskKind::Copy => body.to_vec(),
        TaskKind::Arithmetic => {
            let plus = body.iter().position(|&t| t == PLUS).unwrap_or(body.len());
            let end = body.iter().position(|&t| t == EQ).unwrap_or(body.len());
            let sum = parse_digits(&body[..plus]) + parse_digits(&body[(plus + 1).min(end)..end]);
            let width = if style == LabelStyle::Reference { 3 } else { 1 };
            digits_of(sum, width)
        }
        TaskKind::Mapping => body
            .iter()
            .map(|&t| letter(map_letter(vocab::letter_index(t).unwrap_or(0))))
            .collect(),
        TaskKind::Summary => match style {
            LabelStyle::Canonical => {
                let mut out: Vec<usize> = body.to_vec();
                out.dedup();
                out
            }
            LabelStyle::Reference => {
                let mut out = body.to_vec();
                out.sort_unstable();
                out.dedup();
                out
            }
        },
    }
}

/// Task mix for [`synth_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Samples per task tag.
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub style: LabelStyle,
    /// Longest letter string in a prompt.
    #[serde(default = "default_max_letters")]
    pub max_letters: usize,
    /// Example pairs shown in a mapping task's context.
    #[serde(default = "default_context_pairs")]
    pub context_pairs: usize,
}

fn default_max_letters() -> usize {
    10
}

fn default_context_pairs() -> usize {
    3
}

impl CorpusSpec {
    pub fn balanced(per_task: usize, style: LabelStyle) -> Self {
        Self {
            counts: TaskKind::ALL
                .iter()
                .map(|t| (t.name().to_string(), per_task))
                .collect(),
            style,
            max_letters: default_max_letters(),
            context_pairs: default_context_pairs(),
        }
    }
}

fn random_letters(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| letter(rng.gen_range(0..vocab::N_LETTERS))).collect()
}

fn make_sample(task: TaskKind, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> TaskSample {
    let max = spec.max_letters.max(2);
    let (context, prompt) = match task {
        TaskKind::Copy => {
            let mut p = vec![COPY];
            p.extend(random_letters(rng, 2, max));
            (Vec::new(), p)
        }
        TaskKind::Arithmetic => {
            let (a, b) = (rng.gen_range(0..50), rng.gen_range(0..50));
            let mut p = vec![ADD];
            p.extend(digits_of(a, 1));
            p.push(PLUS);
            p.extend(digits_of(b, 1));
            p.push(EQ);
            (Vec::new(), p)
        }
        TaskKind::Mapping => {
            let context = (0..spec.context_pairs)
                .flat_map(|_| {
                    let i = rng.gen_range(0..vocab::N_LETTERS);
                    [letter(i), letter(map_letter(i))]
                })
                .collect();
            let mut p = vec![MAP];
            p.extend(random_letters(rng, 2, max.min(8)));
            (context, p)
        }
        TaskKind::Summary => {
            let runs = rng.gen_range(2..=max.div_ceil(2).max(2));
            let mut p = vec![SUM];
            let mut prev = None;
            for _ in 0..runs {
                let mut l = rng.gen_range(0..vocab::N_LETTERS);
                while Some(l) == prev {
                    l = rng.gen_range(0..vocab::N_LETTERS);
                }
                prev = Some(l);
                for _ in 0..rng.gen_range(1..=3) {
                    p.push(letter(l));
                }
            }
            (Vec::new(), p)
        }
    };
    let label = solve(task, &prompt, spec.style);
    TaskSample {
        task,
        context,
        prompt,
        label,
    }
}

/// Deterministic mixed-task corpus, shuffled.
pub fn synth_corpus(seed: u64, spec: &CorpusSpec) -> Result<Vec<TaskSample>> {
    if spec.counts.is_empty() {
        return Err(Error::usage("corpus spec lists no tasks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (tag, &count) in &spec.counts {
        let task: TaskKind = tag.parse()?;
        if count == 0 {
            return Err(Error::usage(format!("task `{tag}` has a zero count")));
        }
        for _ in 0..count {
            out.push(make_sample(task, spec, &mut rng));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// `C ∥ SEP ∥ X ∥ SEP ∥ Y`, or `X ∥ SEP ∥ Y` when the context is empty.
pub fn build_distill_prompt(sample: &TaskSample, max_seq: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(sample.context.len() + sample.prompt.len() + sample.label.len() + 2);
    if !sample.context.is_empty() {
        out.extend_from_slice(&sample.context);
        out.push(SEP);
    }
    out.extend_from_slice(&sample.prompt);
    out.push(SEP);
    out.extend_from_slice(&sample.label);
    if out.len() > max_seq {
        return Err(Error::SequenceOverflow {
            needed: out.len(),
            max_seq,
        });
    }
    Ok(out)
}

/// Splits a distillation prompt on separators: `(context, prompt, label)`.
/// Only valid for segments that contain no separator themselves.
pub fn split_distill_prompt(tokens: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let parts: Vec<&[usize]> = tokens.split(|&t| t == SEP).collect();
    match parts.as_slice() {
        [x, y] => Ok((Vec::new(), x.to_vec(), y.to_vec())),
        [c, x, y] => Ok((c.to_vec(), x.to_vec(), y.to_vec())),
        _ => Err(Error::usage(format!(
            "expected one or two separators, found {}",
            parts.len() - 1
        ))),
    }
}

/// `[BOS] prompt [SEP]`: where generation starts.
pub fn render_prompt(prompt: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(prompt.len() + 2);
    out.push(BOS);
    out.extend_from_slice(prompt);
    out.push(SEP);
    out
}

/// `[BOS] prompt [SEP] label [EOS]` and the index of the first label token.
pub fn render_example(prompt: &[usize], label: &[usize]) -> (Vec<usize>, usize) {
    let mut out = render_prompt(prompt);
    let start = out.len();
    out.extend_from_slice(label);
    out.push(EOS);
    (out, start)
}

/// Prompt/label pairs for pretraining a target.
///
/// Every sample contributes its direct form `X → Y`. A `template_fraction`
/// of them also appear in distillation form `C ∥ X ∥ Y_ref → Y`, so the
/// target learns to answer in its own style when shown a dataset label.
/// Each token of the shown `Y_ref` is replaced by a random letter or digit
/// with probability `hint_noise`; the noisier the hint, the more the target
/// answers from `X` alone. `Y` is always canonical.
pub fn pretraining_pairs(
    samples: &[TaskSample],
    template_fraction: f64,
    hint_noise: f64,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let canonical = s.label_in(LabelStyle::Canonical);
        out.push((s.prompt.clone(), canonical.clone()));
        if rng.gen::<f64>() < template_fraction {
            let mut shown = s.clone();
            shown.label = s.label_in(LabelStyle::Reference);
            for t in shown.label.iter_mut() {
                if rng.gen::<f64>() < hint_noise {
                    *t = rng.gen_range(vocab::DIGIT0..vocab::VOCAB_LEN);
                }
            }
            let prompt = build_distill_prompt(&shown, usize::MAX).expect("unbounded");
            out.push((prompt, canonical));
        }
    }
    out
}
