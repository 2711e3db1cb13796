//! Line-delimited JSON datasets.
//!
//! Line 1 is `{"provenance": {...}}`; every later line is one record
//! `{"task": "copy", "prompt": [..], "label": [..]}` with token ids.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SamplerConfig, TaskKind, TaskSample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub format_version: u32,
    /// `reference`, `self_distilled`, ...
    pub source: String,
    /// Fingerprint of the model that wrote the labels, if any.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    pub seed: u64,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            source: String::new(),
            target: None,
            sampler: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    pub prompt: Vec<usize>,
    pub label: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub provenance: Provenance,
    pub records: Vec<DatasetRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    provenance: Provenance,
}

impl LabeledDataset {
    /// Prompts and labels taken as-is from `samples` (context dropped).
    pub fn from_samples(samples: &[TaskSample], seed: u64) -> Self {
        Self {
            provenance: Provenance {
                source: "reference".into(),
                seed,
                ..Provenance::default()
            },
            records: samples
                .iter()
                .map(|s| DatasetRecord {
                    task: Some(s.task),
                    prompt: s.prompt.clone(),
                    label: s.label.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pairs(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.records
            .iter()
            .map(|r| (r.prompt.clone(), r.label.clone()))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &Header {
                provenance: self.provenance.clone(),
            },
        )?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let bad = |line: usize, e: &dyn std::fmt::Display| Error::Dataset {
            line,
            detail: e.to_string(),
        };
        let header = lines
            .next()
            .ok_or_else(|| bad(1, &"missing provenance header"))??;
        let header: Header = serde_json::from_str(&header).map_err(|e| bad(1, &e))?;
        if header.provenance.format_version != DATASET_FORMAT_VERSION {
            return Err(bad(
                1,
                &format!("unsupported format version {}", header.provenance.format_version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?);
        }
        Ok(Self {
            provenance: header.provenance,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

/// `n` items drawn from `sources`, picking source `j` with probability
/// proportional to `weights[j]` and then an item uniformly within it.
pub fn interleave<T: Clone>(sources: &[&[T]], weights: &[f64], n: usize, seed: u64) -> Result<Vec<T>> {
    if sources.len() != weights.len() {
        return Err(Error::usage(format!(
            "{} sources but {} weights",
            sources.len(),
            weights.len()
        )));
    }
    if sources.iter().zip(weights).any(|(s, &w)| s.is_empty() && w > 0.0) {
        return Err(Error::usage("a source with positive weight is empty"));
    }
    let pick = WeightedIndex::new(weights).map_err(|e| Error::usage(format!("bad weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let src = sources[pick.sample(&mut rng)];
            src[rng.gen_range(0..src.len())].clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{synth_corpus, CorpusSpec, LabelStyle};

    #[test]
    fn jsonl_round_trip() {
        let s = synth_corpus(1, &CorpusSpec::balanced(4, LabelStyle::Reference)).unwrap();
        let d = LabeledDataset::from_samples(&s, 1);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().next().unwrap().starts_with("{\"provenance\""));
        assert_eq!(LabeledDataset::read_from(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn bad_lines_are_located() {
        let text = "{\"provenance\":{\"format_version\":1,\"source\":\"x\",\"seed\":0}}\n{\"prompt\":[1],\"label\":[2]}\n{\"prompt\":[1]}\n";
        match LabeledDataset::read_from(text.as_bytes()) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(LabeledDataset::read_from(&b""[..]), Err(Error::Dataset { line: 1, .. })));
    }

    #[test]
    fn interleave_follows_weights() {
        let a = [0u8; 3];
        let b = [1u8; 5];
        let mix = interleave(&[&a, &b], &[0.75, 0.25], 20_000, 3).unwrap();
        let ones = mix.iter().filter(|&&x| x == 1).count() as f64 / 20_000.0;
        assert!((ones - 0.25).abs() < 0.02);
        assert_eq!(mix, interleave(&[&a, &b], &[0.75, 0.25], 20_000, 3).unwrap());
        assert!(interleave(&[&a], &[1.0, 2.0], 3, 0).is_err());
    }
}
