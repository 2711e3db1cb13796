//! Experiment configuration and the staged pipeline behind the CLI.
//!
//! Every stage reads its inputs from and writes its outputs to `out_dir`,
//! together with a provenance record under `provenance/`. A stage whose
//! outputs already exist is skipped unless forced, so deleting an artifact
//! and re-running regenerates exactly that artifact.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! corpus/{pretrain,finetune,suite}.jsonl   one TaskSample per line
//! target.ckpt                              dense target
//! target.curve.json                        pretraining loss curve
//! distilled.jsonl                          self-distilled dataset
//! drafts/<name>.oneshot.ckpt               pruned drafts (with masks)
//! drafts/<name>.sd2.ckpt                   fine-tuned drafts
//! report.json, report.txt                  benchmark report
//! macs.json                                MAC accounting
//! provenance/<stage>.json                  inputs/outputs with sha256
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{bench_specdec, BenchConfig, BenchReport, LatencyConfig, SuiteItem};
use crate::checkpoint::{fingerprint, Checkpoint};
use crate::distill::{
    pretraining_pairs, render_prompt, self_distill, synth_corpus, CorpusSpec, LabelStyle, LabeledDataset,
    SamplerConfig, TaskKind, TaskSample,
};
use crate::error::{Error, Result};
use crate::layerprune::{half_depth, remove_blocks, score_block_groups, select_block_group};
use crate::model::{count_macs, prunable_paths, MacReport, Transformer, TransformerConfig};
use crate::sparsity::{
    angular_distribution, apply_mask, collect_input_norms, compute_saliency, outlier_ratio, owl_distribution,
    prune_mask, AngularForm, SaliencyMethod, SaliencyScores, SparsityPattern, SparsityPlan,
};
use crate::train::{examples_from_pairs, TrainConfig, Trainer};

pub const PROVENANCE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `micro` or a published architecture such as `llama-3.2-3b`.
    #[serde(default = "default_preset")]
    pub preset: String,
    // Any field below overrides the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seq: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_embeddings: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_eps: Option<f64>,
}

fn default_preset() -> String {
    "micro".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            vocab_size: None,
            d_model: None,
            n_layers: None,
            n_heads: None,
            n_kv_heads: None,
            d_head: None,
            d_ff: None,
            max_seq: None,
            tie_embeddings: None,
            rope_base: None,
            norm_eps: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<TransformerConfig> {
        let mut c = if self.preset == "micro" {
            TransformerConfig::micro()
        } else {
            TransformerConfig::preset(&self.preset)?
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(vocab_size, d_model, n_layers, n_heads, n_kv_heads, d_head, d_ff, max_seq, tie_embeddings, rope_base, norm_eps);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Pretraining samples per task tag; 4000 of each task when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<BTreeMap<String, usize>>,
    /// Fine-tuning source samples (D_f) per task tag, labeled in reference style.
    #[serde(default = "default_finetune_per_task")]
    pub finetune_per_task: usize,
    /// Held-out benchmark prompts per task tag.
    #[serde(default = "default_suite_per_task")]
    pub suite_per_task: usize,
    #[serde(default = "default_max_letters")]
    pub max_letters: usize,
    #[serde(default = "default_context_pairs")]
    pub context_pairs: usize,
    /// Share of pretraining samples also shown in distillation-template form.
    #[serde(default = "default_template_fraction")]
    pub template_fraction: f64,
    /// Per-token corruption of the label shown inside those templates.
    #[serde(default = "default_hint_noise")]
    pub hint_noise: f64,
}

fn default_finetune_per_task() -> usize {
    1000
}

fn default_suite_per_task() -> usize {
    200
}

fn default_max_letters() -> usize {
    16
}

fn default_context_pairs() -> usize {
    3
}

fn default_template_fraction() -> f64 {
    0.3
}

fn default_hint_noise() -> f64 {
    0.1
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            pretrain: None,
            finetune_per_task: default_finetune_per_task(),
            suite_per_task: default_suite_per_task(),
            max_letters: default_max_letters(),
            context_pairs: default_context_pairs(),
            template_fraction: default_template_fraction(),
            hint_noise: default_hint_noise(),
        }
    }
}

impl CorpusSection {
    fn spec(&self, counts: BTreeMap<String, usize>, style: LabelStyle) -> CorpusSpec {
        CorpusSpec {
            counts,
            style,
            max_letters: self.max_letters,
            context_pairs: self.context_pairs,
        }
    }

    fn per_task(n: usize) -> BTreeMap<String, usize> {
        TaskKind::ALL.iter().map(|t| (t.name().to_string(), n)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Uniform,
    Owl,
    Angular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneDraft {
    pub name: String,
    pub pattern: SparsityPattern,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    /// Layer-wise allocation; unstructured only.
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default = "default_owl_lambda")]
    pub owl_lambda: f64,
    #[serde(default = "default_owl_m")]
    pub owl_m: f64,
    #[serde(default)]
    pub angular_form: AngularForm,
}

fn default_sparsity() -> f64 {
    0.5
}

fn default_owl_lambda() -> f64 {
    0.08
}

fn default_owl_m() -> f64 {
    5.0
}

impl PruneDraft {
    fn new(name: &str, pattern: SparsityPattern) -> Self {
        Self {
            name: name.into(),
            pattern,
            sparsity: default_sparsity(),
            distribution: Distribution::Uniform,
            owl_lambda: default_owl_lambda(),
            owl_m: default_owl_m(),
            angular_form: AngularForm::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    /// Defaults to activation-weighted, which needs calibration prompts.
    #[serde(default = "default_method")]
    pub method: SaliencyMethod,
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
    #[serde(default = "default_drafts")]
    pub drafts: Vec<PruneDraft>,
}

fn default_method() -> SaliencyMethod {
    SaliencyMethod::ActivationWeighted
}

fn default_calibration() -> usize {
    64
}

fn default_drafts() -> Vec<PruneDraft> {
    vec![
        PruneDraft::new("unstructured-50", SparsityPattern::Unstructured),
        PruneDraft::new("2of4", SparsityPattern::TwoFour),
    ]
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            calibration_samples: default_calibration(),
            drafts: default_drafts(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPruneSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_layer_name")]
    pub name: String,
    /// Blocks to remove; half the depth when absent.
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
}

fn default_true() -> bool {
    true
}

fn default_layer_name() -> String {
    "layer-pruned".into()
}

impl Default for LayerPruneSection {
    fn default() -> Self {
        Self {
            enabled: true,
            name: default_layer_name(),
            blocks: None,
            calibration_samples: default_calibration(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// `seed` inside each table is added to the global seed.
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "default_finetune")]
    pub finetune: TrainConfig,
}

fn default_pretrain() -> TrainConfig {
    TrainConfig::new(2e-3, 10000, 16)
}

fn default_finetune() -> TrainConfig {
    TrainConfig::new(3e-4, 600, 16)
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain: default_pretrain(),
            finetune: default_finetune(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDecSection {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_true")]
    pub stop_at_eos: bool,
}

fn default_ks() -> Vec<usize> {
    vec![5]
}

fn default_max_new() -> usize {
    40
}

impl Default for SpecDecSection {
    fn default() -> Self {
        Self {
            ks: default_ks(),
            max_new_tokens: default_max_new(),
            stop_at_eos: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Measure wall-clock latency; off keeps reports bit-reproducible.
    #[serde(default)]
    pub latency: bool,
    #[serde(default = "default_min_seconds")]
    pub min_seconds: f64,
    /// Also benchmark the target drafting for itself.
    #[serde(default = "default_true")]
    pub include_target: bool,
    /// Also benchmark the drafts before fine-tuning.
    #[serde(default = "default_true")]
    pub include_one_shot: bool,
}

fn default_min_seconds() -> f64 {
    2.0
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            latency: false,
            min_seconds: default_min_seconds(),
            include_target: true,
            include_one_shot: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub distill: SamplerConfig,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub layerprune: LayerPruneSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub specdec: SpecDecSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            distill: SamplerConfig::default(),
            prune: PruneSection::default(),
            layerprune: LayerPruneSection::default(),
            train: TrainSection::default(),
            specdec: SpecDecSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` inside a TOML table. The value is parsed as TOML
/// and falls back to a bare string.
fn set_path(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML, applies `section.key=value` overrides, validates, and
    /// resolves `out_dir` against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        // Start from the defaults so partial sections only override.
        let mut table: toml::Table =
            toml::from_str(&Self::default().to_toml()?).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut table, file);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides. Relative
    /// paths resolve against the config file's directory, else `cwd`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cwd = std::env::current_dir()?;
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                let base = p.parent().map(|d| cwd.join(d)).unwrap_or(cwd);
                Self::from_toml(&text, overrides, &base)
            }
            None => Self::from_toml("", overrides, &cwd),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.train.pretrain.validate()?;
        self.train.finetune.validate()?;
        for tag in self.corpus.pretrain.iter().flat_map(|m| m.keys()) {
            TaskKind::from_str(tag).map_err(|e| Error::config(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.corpus.template_fraction) || !(0.0..=1.0).contains(&self.corpus.hint_noise) {
            return Err(Error::config("template_fraction and hint_noise must lie in [0, 1]"));
        }
        if self.specdec.ks.is_empty() || self.specdec.ks.contains(&0) {
            return Err(Error::config("specdec.ks needs values >= 1"));
        }
        let mut names: Vec<&str> = self.prune.drafts.iter().map(|d| d.name.as_str()).collect();
        if self.layerprune.enabled {
            names.push(&self.layerprune.name);
        }
        let n = names.len();
        names.sort();
        names.dedup();
        if names.len() != n || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(Error::config("draft names must be unique, non-empty and free of path separators"));
        }
        for d in &self.prune.drafts {
            if !(0.0..1.0).contains(&d.sparsity) {
                return Err(Error::config(format!("draft `{}`: sparsity must lie in [0, 1)", d.name)));
            }
            if d.pattern == SparsityPattern::TwoFour && d.distribution != Distribution::Uniform {
                return Err(Error::config(format!("draft `{}`: 2:4 drafts use a uniform distribution", d.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Corpus,
    Pretrain,
    Distill,
    Prune,
    Layerprune,
    Finetune,
    Bench,
    Macs,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Corpus,
        Stage::Pretrain,
        Stage::Distill,
        Stage::Prune,
        Stage::Layerprune,
        Stage::Finetune,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Pretrain => "pretrain",
            Stage::Distill => "distill",
            Stage::Prune => "prune",
            Stage::Layerprune => "layerprune",
            Stage::Finetune => "finetune",
            Stage::Bench => "bench",
            Stage::Macs => "macs",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::PIPELINE
            .iter()
            .chain([Stage::Macs].iter())
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub format_version: u32,
    pub stage: String,
    pub seed: u64,
    /// The config sections this stage read.
    pub config: serde_json::Value,
    /// Relative path → sha256 of every input and output file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

/// Artifact paths inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn pretrain_corpus(&self) -> PathBuf {
        self.root.join("corpus/pretrain.jsonl")
    }

    pub fn finetune_corpus(&self) -> PathBuf {
        self.root.join("corpus/finetune.jsonl")
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("corpus/suite.jsonl")
    }

    pub fn target(&self) -> PathBuf {
        self.root.join("target.ckpt")
    }

    pub fn target_curve(&self) -> PathBuf {
        self.root.join("target.curve.json")
    }

    pub fn distilled(&self) -> PathBuf {
        self.root.join("distilled.jsonl")
    }

    pub fn one_shot(&self, name: &str) -> PathBuf {
        self.root.join(format!("drafts/{name}.oneshot.ckpt"))
    }

    pub fn fine_tuned(&self, name: &str) -> PathBuf {
        self.root.join(format!("drafts/{name}.sd2.ckpt"))
    }

    pub fn fine_tune_curve(&self, name: &str) -> PathBuf {
        self.root.join(format!("drafts/{name}.sd2.curve.json"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn macs(&self) -> PathBuf {
        self.root.join("macs.json")
    }

    pub fn provenance(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("provenance/{stage}.json"))
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

pub fn write_samples(path: &Path, samples: &[TaskSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_samples(path: &Path) -> Result<Vec<TaskSample>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Derived seeds so that stages never share a random stream.
fn sub_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub layout: Layout,
    model_config: TransformerConfig,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model_config = config.model.resolve()?;
        let layout = Layout::new(config.out_dir.clone());
        Ok(Self {
            config,
            layout,
            model_config,
        })
    }

    fn require(&self, path: &Path, stage: Stage) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name().into(),
                path: path.to_path_buf(),
            })
        }
    }

    fn load_checkpoint(&self, path: &Path, stage: Stage) -> Result<Checkpoint> {
        self.require(path, stage)?;
        Checkpoint::load(path)
    }

    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let l = &self.layout;
        match stage {
            Stage::Corpus => vec![l.pretrain_corpus(), l.finetune_corpus(), l.suite()],
            Stage::Pretrain => vec![l.target(), l.target_curve()],
            Stage::Distill => vec![l.distilled()],
            Stage::Prune => self.config.prune.drafts.iter().map(|d| l.one_shot(&d.name)).collect(),
            Stage::Layerprune => {
                if self.config.layerprune.enabled {
                    vec![l.one_shot(&self.config.layerprune.name)]
                } else {
                    Vec::new()
                }
            }
            Stage::Finetune => self
                .draft_names()
                .iter()
                .flat_map(|n| [l.fine_tuned(n), l.fine_tune_curve(n)])
                .collect(),
            Stage::Bench => vec![l.report_json(), l.report_txt()],
            Stage::Macs => vec![l.macs()],
        }
    }

    fn inputs(&self, stage: Stage) -> Vec<(PathBuf, Stage)> {
        let l = &self.layout;
        match stage {
            Stage::Corpus | Stage::Macs => Vec::new(),
            Stage::Pretrain => vec![(l.pretrain_corpus(), Stage::Corpus)],
            Stage::Distill => vec![(l.target(), Stage::Pretrain), (l.finetune_corpus(), Stage::Corpus)],
            Stage::Prune | Stage::Layerprune => {
                vec![(l.target(), Stage::Pretrain), (l.pretrain_corpus(), Stage::Corpus)]
            }
            Stage::Finetune => {
                let mut v = vec![(l.distilled(), Stage::Distill)];
                for d in &self.config.prune.drafts {
                    v.push((l.one_shot(&d.name), Stage::Prune));
                }
                if self.config.layerprune.enabled {
                    v.push((l.one_shot(&self.config.layerprune.name), Stage::Layerprune));
                }
                v
            }
            Stage::Bench => {
                let mut v = vec![(l.target(), Stage::Pretrain), (l.suite(), Stage::Corpus)];
                for d in &self.config.prune.drafts {
                    if self.config.report.include_one_shot {
                        v.push((l.one_shot(&d.name), Stage::Prune));
                    }
                    v.push((l.fine_tuned(&d.name), Stage::Finetune));
                }
                if self.config.layerprune.enabled {
                    let n = &self.config.layerprune.name;
                    if self.config.report.include_one_shot {
                        v.push((l.one_shot(n), Stage::Layerprune));
                    }
                    v.push((l.fine_tuned(n), Stage::Finetune));
                }
                v
            }
        }
    }

    fn draft_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.config.prune.drafts.iter().map(|d| d.name.clone()).collect();
        if self.config.layerprune.enabled {
            names.push(self.config.layerprune.name.clone());
        }
        names
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::Corpus => serde_json::json!({ "corpus": v(&c.corpus) }),
            Stage::Pretrain => serde_json::json!({ "model": v(&c.model), "corpus": v(&c.corpus), "train.pretrain": v(&c.train.pretrain) }),
            Stage::Distill => serde_json::json!({ "distill": v(&c.distill) }),
            Stage::Prune => serde_json::json!({ "prune": v(&c.prune) }),
            Stage::Layerprune => serde_json::json!({ "layerprune": v(&c.layerprune) }),
            Stage::Finetune => serde_json::json!({ "train.finetune": v(&c.train.finetune) }),
            Stage::Bench => serde_json::json!({ "specdec": v(&c.specdec), "report": v(&c.report) }),
            Stage::Macs => serde_json::json!({ "model": v(&c.model), "prune": v(&c.prune), "layerprune": v(&c.layerprune) }),
        }
    }

    /// Runs `stage` unless all of its outputs exist (or `force`).
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let outputs = self.outputs(stage);
        if !force && !outputs.is_empty() && outputs.iter().all(|p| p.exists()) {
            return Ok(StageOutcome::Skipped);
        }
        let inputs = self.inputs(stage);
        for (p, producer) in &inputs {
            self.require(p, *producer)?;
        }
        match stage {
            Stage::Corpus => self.corpus()?,
            Stage::Pretrain => self.pretrain()?,
            Stage::Distill => self.distill()?,
            Stage::Prune => self.prune()?,
            Stage::Layerprune => self.layerprune()?,
            Stage::Finetune => self.finetune()?,
            Stage::Bench => {
                self.bench()?;
            }
            Stage::Macs => {
                self.macs()?;
            }
        }
        let hash = |paths: &mut dyn Iterator<Item = &PathBuf>| -> Result<BTreeMap<String, String>> {
            paths
                .map(|p| Ok((self.layout.relative(p), sha256_file(p)?)))
                .collect()
        };
        let record = ProvenanceRecord {
            format_version: PROVENANCE_FORMAT_VERSION,
            stage: stage.name().into(),
            seed: self.config.seed,
            config: self.section(stage),
            inputs: hash(&mut inputs.iter().map(|(p, _)| p))?,
            outputs: hash(&mut outputs.iter())?,
        };
        write_json(&self.layout.provenance(stage), &record)?;
        Ok(StageOutcome::Ran)
    }

    /// Runs the stages in dependency order.
    pub fn run(&self, stages: &[Stage], force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        ordered
            .into_iter()
            .map(|s| Ok((s, self.run_stage(s, force)?)))
            .collect()
    }

    fn corpus(&self) -> Result<()> {
        let c = &self.config.corpus;
        let seed = self.config.seed;
        let pretrain = synth_corpus(sub_seed(seed, 1), &c.spec(
                c.pretrain.clone().unwrap_or_else(|| CorpusSection::per_task(4000)),
                LabelStyle::Canonical,
            ))?;
        let finetune = synth_corpus(
            sub_seed(seed, 2),
            &c.spec(CorpusSection::per_task(c.finetune_per_task), LabelStyle::Reference),
        )?;
        let suite = synth_corpus(
            sub_seed(seed, 3),
            &c.spec(CorpusSection::per_task(c.suite_per_task), LabelStyle::Canonical),
        )?;
        write_samples(&self.layout.pretrain_corpus(), &pretrain)?;
        write_samples(&self.layout.finetune_corpus(), &finetune)?;
        write_samples(&self.layout.suite(), &suite)
    }

    fn pretrain(&self) -> Result<()> {
        let c = &self.config;
        let samples = read_samples(&self.layout.pretrain_corpus())?;
        let pairs = pretraining_pairs(
            &samples,
            c.corpus.template_fraction,
            c.corpus.hint_noise,
            sub_seed(c.seed, 4),
        );
        let examples = examples_from_pairs(&pairs, self.model_config.max_seq)?;
        let model = Transformer::<f32>::random(self.model_config.clone(), sub_seed(c.seed, 5))?;
        let mut tc = c.train.pretrain.clone();
        tc.seed = sub_seed(c.seed, 6).wrapping_add(tc.seed);
        let out = Trainer::new(model, examples, tc, None)?.run()?;
        let mut ck = Checkpoint::new(out.model);
        ck.meta = serde_json::json!({ "stage": "pretrain", "seed": c.seed, "final_loss": out.final_loss });
        ck.save(&self.layout.target())?;
        write_json(&self.layout.target_curve(), &out.curve)
    }

    fn distill(&self) -> Result<()> {
        let target = self.load_checkpoint(&self.layout.target(), Stage::Pretrain)?.model;
        let samples = read_samples(&self.layout.finetune_corpus())?;
        let id = fingerprint(&target)?;
        let ds = self_distill(&target, &samples, &self.config.distill, sub_seed(self.config.seed, 7), &id)?;
        if let Some(dir) = self.layout.distilled().parent() {
            fs::create_dir_all(dir)?;
        }
        ds.save(&self.layout.distilled())
    }

    fn calibration(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let samples = read_samples(&self.layout.pretrain_corpus())?;
        let prompts: Vec<Vec<usize>> = samples.iter().take(n).map(|s| render_prompt(&s.prompt)).collect();
        if prompts.is_empty() {
            return Err(Error::config("calibration needs at least one prompt"));
        }
        Ok(prompts)
    }

    fn prune(&self) -> Result<()> {
        let target = self.load_checkpoint(&self.layout.target(), Stage::Pretrain)?.model;
        let pc = &self.config.prune;
        let scope = prunable_paths(&target.config);
        let calib = self.calibration(pc.calibration_samples)?;
        let norms = match pc.method {
            SaliencyMethod::ActivationWeighted => Some(collect_input_norms(&target, &calib)?),
            SaliencyMethod::Magnitude => None,
        };
        let scores = compute_saliency(&target.weights, pc.method, norms.as_ref(), &scope)?;
        let target_id = fingerprint(&target)?;
        for d in &pc.drafts {
            let plan = draft_plan(&target, d, &scores, &calib)?;
            let mask = prune_mask(&scores, &plan)?;
            let mut model = target.clone();
            apply_mask(&mut model.weights, &mask)?;
            let ck = Checkpoint {
                model,
                mask: Some(mask),
                meta: serde_json::json!({ "stage": "prune", "draft": d, "target": target_id, "plan": plan }),
            };
            ck.save(&self.layout.one_shot(&d.name))?;
        }
        Ok(())
    }

    fn layerprune(&self) -> Result<()> {
        let lc = &self.config.layerprune;
        if !lc.enabled {
            return Ok(());
        }
        let target = self.load_checkpoint(&self.layout.target(), Stage::Pretrain)?.model;
        let n = lc.blocks.unwrap_or_else(|| half_depth(target.depth()));
        let calib = self.calibration(lc.calibration_samples)?;
        let group = select_block_group(&target, &calib, n)?;
        let model = remove_blocks(&target, group.start, n)?;
        let ck = Checkpoint {
            model,
            mask: None,
            meta: serde_json::json!({ "stage": "layerprune", "removed": group, "target": fingerprint(&target)? }),
        };
        ck.save(&self.layout.one_shot(&lc.name))
    }

    fn finetune(&self) -> Result<()> {
        let ds = LabeledDataset::load(&self.layout.distilled())?;
        let examples = examples_from_pairs(&ds.pairs(), self.model_config.max_seq)?;
        let mut tc = self.config.train.finetune.clone();
        tc.seed = sub_seed(self.config.seed, 8).wrapping_add(tc.seed);
        for name in self.draft_names() {
            let ck = Checkpoint::load(&self.layout.one_shot(&name))?;
            let out = Trainer::new(ck.model, examples.clone(), tc.clone(), ck.mask.as_ref())?.run()?;
            let tuned = Checkpoint {
                model: out.model,
                mask: ck.mask,
                meta: serde_json::json!({
                    "stage": "finetune",
                    "draft": name,
                    "dataset": ds.provenance,
                    "final_loss": out.final_loss,
                }),
            };
            tuned.save(&self.layout.fine_tuned(&name))?;
            write_json(&self.layout.fine_tune_curve(&name), &out.curve)?;
        }
        Ok(())
    }

    /// Benchmarks every draft against the target and writes the report.
    pub fn bench(&self) -> Result<BenchReport> {
        let target = self.load_checkpoint(&self.layout.target(), Stage::Pretrain)?.model;
        self.require(&self.layout.suite(), Stage::Corpus)?;
        let suite: Vec<SuiteItem> = read_samples(&self.layout.suite())?
            .iter()
            .map(|s| SuiteItem {
                category: s.task.name().to_string(),
                prompt: render_prompt(&s.prompt),
            })
            .collect();
        let rc = &self.config.report;
        let mut models: Vec<(String, Transformer<f32>)> = Vec::new();
        if rc.include_target {
            models.push(("target".into(), target.clone()));
        }
        for name in self.draft_names() {
            if rc.include_one_shot {
                let stage = if self.config.prune.drafts.iter().any(|d| d.name == name) {
                    Stage::Prune
                } else {
                    Stage::Layerprune
                };
                let ck = self.load_checkpoint(&self.layout.one_shot(&name), stage)?;
                models.push((format!("{name}/one-shot"), ck.model));
            }
            let ck = self.load_checkpoint(&self.layout.fine_tuned(&name), Stage::Finetune)?;
            models.push((format!("{name}/sd2"), ck.model));
        }
        let drafts: Vec<(String, &Transformer<f32>)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
        let sc = &self.config.specdec;
        let cfg = BenchConfig {
            ks: sc.ks.clone(),
            max_new_tokens: sc.max_new_tokens,
            eos_token: sc.stop_at_eos.then_some(crate::distill::vocab::EOS),
            latency: rc.latency.then(|| LatencyConfig {
                min_seconds: rc.min_seconds,
                prefix_len: 16,
            }),
        };
        let report = bench_specdec(&drafts, ("target", &target), &suite, &cfg)?;
        write_json(&self.layout.report_json(), &report)?;
        write_atomic(&self.layout.report_txt(), report.to_table().as_bytes())?;
        Ok(report)
    }

    /// Nominal MACs per token for the dense model, each configured draft at
    /// its uniform sparsity, and the layer-pruned draft. Needs no training.
    pub fn macs(&self) -> Result<Vec<(String, MacReport)>> {
        let c = &self.model_config;
        let mut out = vec![("dense".to_string(), count_macs(c, None, None)?)];
        for d in &self.config.prune.drafts {
            let plan = SparsityPlan::uniform(c, d.sparsity, d.pattern)?;
            out.push((d.name.clone(), count_macs(c, Some(&plan), None)?));
        }
        if self.config.layerprune.enabled {
            let n = self.config.layerprune.blocks.unwrap_or_else(|| half_depth(c.n_layers));
            out.push((self.config.layerprune.name.clone(), count_macs(c, None, Some(n))?));
        }
        let as_map: Vec<serde_json::Value> = out
            .iter()
            .map(|(n, r)| serde_json::json!({ "name": n, "macs": r }))
            .collect();
        write_json(&self.layout.macs(), &as_map)?;
        Ok(out)
    }
}

/// Sparsity plan for one draft, including non-uniform layer allocations.
fn draft_plan(
    target: &Transformer<f32>,
    d: &PruneDraft,
    scores: &SaliencyScores,
    calib: &[Vec<usize>],
) -> Result<SparsityPlan> {
    let c = &target.config;
    match (d.pattern, d.distribution) {
        (SparsityPattern::TwoFour, _) => SparsityPlan::uniform(c, 0.5, SparsityPattern::TwoFour),
        (p, Distribution::Uniform) => SparsityPlan::uniform(c, d.sparsity, p),
        (p, Distribution::Owl) => {
            let ratios = outlier_ratio(scores, d.owl_m)?;
            SparsityPlan::per_block(c, &owl_distribution(&ratios, d.sparsity, d.owl_lambda)?, p)
        }
        (p, Distribution::Angular) => {
            let distances: Vec<f64> = score_block_groups(target, calib, 1)?
                .iter()
                .map(|s| s.distance)
                .collect();
            SparsityPlan::per_block(c, &angular_distribution(&distances, d.sparsity, d.angular_form)?, p)
        }
    }
}

fn v<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).unwrap_or(serde_json::Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let text = r#"
            seed = 3
            out_dir = "out"
            [model]
            n_layers = 2
            d_model = 32
            n_heads = 2
            n_kv_heads = 1
            d_head = 16
            d_ff = 64
            [corpus]
            pretrain = { copy = 12, arithmetic = 12 }
            finetune_per_task = 3
            suite_per_task = 2
            [train.pretrain]
            lr = 3e-3
            steps = 6
            batch_size = 4
            [train.finetune]
            lr = 1e-3
            steps = 4
            batch_size = 4
            [distill]
            max_gen = 12
            [specdec]
            ks = [2, 3]
            max_new_tokens = 8
        "#;
        ExperimentConfig::from_toml(text, &[], dir).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text, &[], Path::new("/")).unwrap();
        assert_eq!(back.train, c.train);
        assert_eq!(back.prune, c.prune);
        assert_eq!(back.model.resolve().unwrap(), TransformerConfig::micro());
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_rejected() {
        let base = Path::new("/");
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1", &[], base), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[train.pretrain]\nlr = 1e-3\nsteps = 1\nbatch_size = 1\nmomentum = 0.9", &[], base),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("", &["specdec.ks".into()], base).is_err());
        assert!(ExperimentConfig::from_toml("", &["prune.nope=3".into()], base).is_err());
    }

    #[test]
    fn overrides_land_in_their_sections() {
        let c = ExperimentConfig::from_toml(
            "",
            &[
                "specdec.ks=[1, 3, 8]".into(),
                "train.finetune.lr=0.01".into(),
                "model.preset=llama-3.2-3b".into(),
                "seed=9".into(),
            ],
            Path::new("/tmp"),
        )
        .unwrap();
        assert_eq!(c.specdec.ks, vec![1, 3, 8]);
        assert_eq!(c.train.finetune.lr, 0.01);
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.resolve().unwrap(), TransformerConfig::llama_3_2_3b());
        assert_eq!(c.out_dir, Path::new("/tmp/run"));
    }

    #[test]
    fn macs_stage_needs_no_training() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml("model.preset = \"llama-3.2-3b\"", &[], dir.path()).unwrap();
        let p = Pipeline::new(c).unwrap();
        assert_eq!(p.run_stage(Stage::Macs, false).unwrap(), StageOutcome::Ran);
        let macs = p.macs().unwrap();
        let unstructured = &macs.iter().find(|(n, _)| n == "unstructured-50").unwrap().1;
        assert!((unstructured.reduction_fraction - 0.4387).abs() < 0.005);
        assert!(p.layout.macs().exists() && !p.layout.target().exists());
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny(dir.path())).unwrap();
        match p.run_stage(Stage::Distill, false) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "pretrain"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pipeline_is_resumable_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny(dir.path())).unwrap();
        let first = p.run(&Stage::PIPELINE, false).unwrap();
        assert!(first.iter().all(|(_, o)| *o == StageOutcome::Ran));
        let report = fs::read(p.layout.report_json()).unwrap();
        let target = fs::read(p.layout.target()).unwrap();

        // Nothing to do on a second pass.
        let again = p.run(&Stage::PIPELINE, false).unwrap();
        assert!(again.iter().all(|(_, o)| *o == StageOutcome::Skipped));

        // Removing downstream artifacts regenerates them bit-identically.
        fs::remove_file(p.layout.distilled()).unwrap();
        fs::remove_file(p.layout.fine_tuned("2of4")).unwrap();
        fs::remove_file(p.layout.report_json()).unwrap();
        p.run(&Stage::PIPELINE, false).unwrap();
        assert_eq!(fs::read(p.layout.report_json()).unwrap(), report);
        assert_eq!(fs::read(p.layout.target()).unwrap(), target);

        let prov: ProvenanceRecord =
            serde_json::from_slice(&fs::read(p.layout.provenance(Stage::Finetune)).unwrap()).unwrap();
        assert!(prov.inputs.contains_key("distilled.jsonl"));
        assert_eq!(prov.outputs.len(), 6);

        // A fresh directory with the same seed gives the same report.
        let dir2 = tempfile::tempdir().unwrap();
        let p2 = Pipeline::new(tiny(dir2.path())).unwrap();
        p2.run(&Stage::PIPELINE, false).unwrap();
        assert_eq!(fs::read(p2.layout.report_json()).unwrap(), report);
    }

    #[test]
    fn self_drafting_target_reaches_k_plus_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.specdec.stop_at_eos = false;
        c.specdec.max_new_tokens = 12;
        let p = Pipeline::new(c).unwrap();
        p.run(&Stage::PIPELINE, false).unwrap();
        let report: BenchReport = serde_json::from_slice(&fs::read(p.layout.report_json()).unwrap()).unwrap();
        let own = report.draft("target").unwrap();
        for kr in &own.per_k {
            // 12 new tokens split into whole rounds for k = 2 and k = 3.
            for cat in &kr.categories {
                assert_eq!(cat.mal, (kr.k + 1) as f64);
            }
        }
    }
}
