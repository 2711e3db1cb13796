//! Speculative-decoding benchmark: per-category MAL for each draft and k,
//! MAC- and latency-based cost factors, modeled improvement factors, and
//! pairwise MAL comparisons.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_macs, Transformer};
use crate::sparsity::SparsityPlan;
use crate::specdec::{cost_factor, improvement_factor, speculative_decode, SpecDecodeConfig, SpecStats};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// One held-out prompt, already rendered for generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub category: String,
    pub prompt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    /// Keep timing until this much wall time has passed.
    pub min_seconds: f64,
    /// Cached positions before the timed token.
    #[serde(default = "default_prefix")]
    pub prefix_len: usize,
}

fn default_prefix() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub eos_token: Option<usize>,
    /// Wall-clock cost factors; off keeps the report deterministic.
    #[serde(default)]
    pub latency: Option<LatencyConfig>,
}

/// Raw round totals for one (draft, k, category) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub sessions: usize,
    pub rounds: usize,
    pub drafted: usize,
    pub accepted: usize,
    /// Sum over rounds of accepted + 1 (capped by what was emitted).
    pub total_length: usize,
    pub mal: f64,
}

impl CategoryResult {
    fn from_stats(category: &str, sessions: usize, stats: &SpecStats) -> Self {
        let rounds = stats.rounds.len();
        Self {
            category: category.to_string(),
            sessions,
            rounds,
            drafted: stats.total_drafted(),
            accepted: stats.total_accepted(),
            total_length: stats.total_length(),
            mal: if rounds == 0 {
                f64::NAN
            } else {
                stats.total_length() as f64 / rounds as f64
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KResult {
    pub k: usize,
    pub categories: Vec<CategoryResult>,
    /// Round-weighted mean of the category MALs.
    pub aggregate_mal: f64,
    /// Unweighted mean of the category MALs.
    pub category_mean_mal: f64,
    pub improvement_mac: f64,
    #[serde(default)]
    pub improvement_latency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub name: String,
    pub macs_per_token: f64,
    #[serde(default)]
    pub latency_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftResult {
    pub cost: ModelCost,
    pub c_mac: f64,
    #[serde(default)]
    pub c_latency: Option<f64>,
    pub per_k: Vec<KResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: Option<usize>,
    pub better: String,
    pub worse: String,
    /// `mal(better) / mal(worse)`.
    pub ratio: f64,
    /// `(mal(worse) − mal(better)) / mal(worse)` in percent; negative when
    /// `better` has the higher MAL.
    pub reduction_pct: f64,
}

impl Comparison {
    pub fn between(better: (&str, f64), worse: (&str, f64), k: Option<usize>) -> Result<Self> {
        Ok(Self {
            k,
            better: better.0.to_string(),
            worse: worse.0.to_string(),
            ratio: mal_ratio(better.1, worse.1)?,
            reduction_pct: 100.0 * mal_reduction(worse.1, better.1)?,
        })
    }
}

/// `a / b`.
pub fn mal_ratio(a: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) || !(a >= 0.0) {
        return Err(Error::usage(format!("MAL ratio of {a} to {b}")));
    }
    Ok(a / b)
}

/// Fractional drop from `reference` to `other`: `(reference − other) / reference`.
pub fn mal_reduction(reference: f64, other: f64) -> Result<f64> {
    if !(reference > 0.0) || !(other >= 0.0) {
        return Err(Error::usage(format!("MAL reduction from {reference} to {other}")));
    }
    Ok((reference - other) / reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub target: ModelCost,
    pub drafts: Vec<DraftResult>,
    pub comparisons: Vec<Comparison>,
}

impl BenchReport {
    pub fn draft(&self, name: &str) -> Option<&DraftResult> {
        self.drafts.iter().find(|d| d.cost.name == name)
    }

    /// Aggregate MAL of `draft` at `k`.
    pub fn mal(&self, draft: &str, k: usize) -> Option<f64> {
        self.draft(draft)?
            .per_k
            .iter()
            .find(|r| r.k == k)
            .map(|r| r.aggregate_mal)
    }

    /// Human-readable summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "target {}: {:.0} MACs/token{}",
            self.target.name,
            self.target.macs_per_token,
            self.target
                .latency_seconds
                .map(|l| format!(", {:.1} us/token", l * 1e6))
                .unwrap_or_default()
        );
        for d in &self.drafts {
            let _ = writeln!(
                s,
                "\ndraft {}: {:.0} MACs/token, c_mac {:.4}{}",
                d.cost.name,
                d.cost.macs_per_token,
                d.c_mac,
                d.c_latency.map(|c| format!(", c_latency {c:.4}")).unwrap_or_default()
            );
            for r in &d.per_k {
                let cats: Vec<String> = r
                    .categories
                    .iter()
                    .map(|c| format!("{} {:.3}", c.category, c.mal))
                    .collect();
                let _ = writeln!(
                    s,
                    "  k={:<2} MAL {:.3} (category mean {:.3})  improvement mac {:.3}{}  [{}]",
                    r.k,
                    r.aggregate_mal,
                    r.category_mean_mal,
                    r.improvement_mac,
                    r.improvement_latency
                        .map(|x| format!(" latency {x:.3}"))
                        .unwrap_or_default(),
                    cats.join(", ")
                );
            }
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s, "\ncomparisons");
            for c in &self.comparisons {
                let _ = writeln!(
                    s,
                    "  {}{} vs {}: x{:.3} MAL, {:.2}% reduction",
                    c.k.map(|k| format!("k={k} ")).unwrap_or_default(),
                    c.better,
                    c.worse,
                    c.ratio,
                    c.reduction_pct
                );
            }
        }
        s
    }
}

/// Median wall time of a single-token forward after a cached prefix,
/// repeated until `cfg.min_seconds` have elapsed.
pub fn median_token_latency(model: &Transformer<f32>, cfg: &LatencyConfig) -> Result<f64> {
    let prefix_len = cfg.prefix_len.clamp(1, model.config.max_seq - 1);
    let prefix: Vec<usize> = (0..prefix_len).map(|i| 1 + i % (model.config.vocab_size - 1)).collect();
    let mut cache = model.new_cache();
    model.forward(&prefix, Some(&mut cache))?;
    let budget = Duration::from_secs_f64(cfg.min_seconds.max(0.0));
    let start = Instant::now();
    let mut samples = Vec::new();
    while samples.len() < 5 || start.elapsed() < budget {
        let mut c = cache.clone();
        let t = Instant::now();
        model.forward(&[1], Some(&mut c))?;
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

/// Effective MACs per token, counting only nonzero weights.
pub fn effective_macs(model: &Transformer<f32>) -> Result<f64> {
    let plan = SparsityPlan::measured(&model.config, &model.weights)?;
    Ok(count_macs(&model.config, Some(&plan), None)?.effective_total)
}

fn run_cell(
    draft: &Transformer<f32>,
    target: &Transformer<f32>,
    suite: &[SuiteItem],
    categories: &[String],
    k: usize,
    cfg: &BenchConfig,
) -> Result<Vec<CategoryResult>> {
    let spec = SpecDecodeConfig {
        k,
        max_new_tokens: cfg.max_new_tokens,
        eos_token: cfg.eos_token,
    };
    categories
        .iter()
        .map(|cat| {
            let mut stats = SpecStats::default();
            let mut sessions = 0;
            for item in suite.iter().filter(|i| &i.category == cat) {
                let (_, s) = speculative_decode(draft, target, &item.prompt, &spec)?;
                stats.extend(&s);
                sessions += 1;
            }
            Ok(CategoryResult::from_stats(cat, sessions, &stats))
        })
        .collect()
}

fn aggregate(k: usize, categories: Vec<CategoryResult>, c_mac: f64, c_latency: Option<f64>) -> Result<KResult> {
    let rounds: usize = categories.iter().map(|c| c.rounds).sum();
    if rounds == 0 {
        return Err(Error::usage("benchmark produced no decoding rounds"));
    }
    let aggregate_mal = categories.iter().map(|c| c.total_length).sum::<usize>() as f64 / rounds as f64;
    let with_rounds: Vec<&CategoryResult> = categories.iter().filter(|c| c.rounds > 0).collect();
    let category_mean_mal = with_rounds.iter().map(|c| c.mal).sum::<f64>() / with_rounds.len() as f64;
    Ok(KResult {
        k,
        improvement_mac: improvement_factor(aggregate_mal, k, c_mac)?,
        improvement_latency: c_latency
            .map(|c| improvement_factor(aggregate_mal, k, c))
            .transpose()?,
        categories,
        aggregate_mal,
        category_mean_mal,
    })
}

/// Runs every (draft, k) cell over the suite. Comparisons are emitted for
/// every pair of drafts at every k, ordered as given.
pub fn bench_specdec(
    drafts: &[(String, &Transformer<f32>)],
    target: (&str, &Transformer<f32>),
    suite: &[SuiteItem],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if suite.is_empty() {
        return Err(Error::usage("benchmark suite is empty"));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::usage("benchmark needs k values >= 1"));
    }
    let (target_name, target_model) = target;
    for (_, d) in drafts {
        if d.config.vocab_size != target_model.config.vocab_size {
            return Err(Error::VocabMismatch {
                draft: d.config.vocab_size,
                target: target_model.config.vocab_size,
            });
        }
    }
    let mut categories: Vec<String> = suite.iter().map(|i| i.category.clone()).collect();
    categories.sort();
    categories.dedup();

    let target_macs = effective_macs(target_model)?;
    let target_latency = cfg
        .latency
        .as_ref()
        .map(|l| median_token_latency(target_model, l))
        .transpose()?;

    let cells: Vec<(usize, usize)> = (0..drafts.len())
        .flat_map(|d| cfg.ks.iter().map(move |&k| (d, k)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(d, k)| run_cell(drafts[d].1, target_model, suite, &categories, k, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(drafts.len());
    let mut results = results.into_iter();
    for (name, model) in drafts {
        let macs = effective_macs(model)?;
        let c_mac = cost_factor(macs, target_macs)?;
        let latency = cfg
            .latency
            .as_ref()
            .map(|l| median_token_latency(model, l))
            .transpose()?;
        let c_latency = match (latency, target_latency) {
            (Some(d), Some(t)) => Some(cost_factor(d, t)?),
            _ => None,
        };
        let per_k = cfg
            .ks
            .iter()
            .map(|&k| aggregate(k, results.next().expect("one result per cell"), c_mac, c_latency))
            .collect::<Result<Vec<_>>>()?;
        out.push(DraftResult {
            cost: ModelCost {
                name: name.clone(),
                macs_per_token: macs,
                latency_seconds: latency,
            },
            c_mac,
            c_latency,
            per_k,
        });
    }

    let mut comparisons = Vec::new();
    for &k in &cfg.ks {
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let a = &out[i];
                let b = &out[j];
                let mal = |d: &DraftResult| d.per_k.iter().find(|r| r.k == k).map(|r| r.aggregate_mal);
                if let (Some(ma), Some(mb)) = (mal(a), mal(b)) {
                    comparisons.push(Comparison::between((&a.cost.name, ma), (&b.cost.name, mb), Some(k))?);
                }
            }
        }
    }

    Ok(BenchReport {
        format_version: REPORT_FORMAT_VERSION,
        target: ModelCost {
            name: target_name.to_string(),
            macs_per_token: target_macs,
            latency_seconds: target_latency,
        },
        drafts: out,
        comparisons,
    })
}
