use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use drafter_core::bench::BenchReport;
use drafter_core::checkpoint::Checkpoint;
use drafter_core::distill::vocab;
use drafter_core::pipeline::{ExperimentConfig, Pipeline, Stage, StageOutcome};
use drafter_core::specdec::{mean_accepted_length, speculative_decode, SpecDecodeConfig};
use drafter_core::Error;

#[derive(Parser)]
#[command(name = "drafter", version, about = "Sparse speculative-decoding drafters at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.finetune.lr=1e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Re-run even if the stage's outputs exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pretraining, fine-tuning and benchmark corpora.
    Corpus(Common),
    /// Train the dense target.
    Pretrain(Common),
    /// Regenerate fine-tuning labels with the target.
    Distill(Common),
    /// One-shot prune the configured drafts.
    Prune(Common),
    /// Remove the most redundant block group.
    Layerprune(Common),
    /// Sparse fine-tuning of every draft on the distilled data.
    Finetune(Common),
    /// Speculatively decode one prompt and print the rounds.
    Specdec {
        #[command(flatten)]
        common: Common,
        /// Draft name (as in `drafts/<name>.sd2.ckpt`) or checkpoint path.
        #[arg(long)]
        draft: String,
        /// Target checkpoint; the run's target by default.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Space-separated token ids, without BOS/SEP.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Per-token MAC accounting; no training needed.
    Macs(Common),
    /// Benchmark all drafts against the target.
    Bench(Common),
    /// Print a stored benchmark report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Emit the machine-readable record instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run pipeline stages in dependency order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages; all training stages when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
}

fn pipeline(common: &Common) -> anyhow::Result<Pipeline> {
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
    Ok(Pipeline::new(cfg)?)
}

fn stage(common: &Common, stage: Stage) -> anyhow::Result<()> {
    let p = pipeline(common)?;
    report_outcome(stage, p.run_stage(stage, common.force)?);
    Ok(())
}

fn report_outcome(stage: Stage, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => eprintln!("{stage}: done"),
        StageOutcome::Skipped => eprintln!("{stage}: up to date (use --force to redo)"),
    }
}

fn parse_tokens(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().with_context(|| format!("bad token id `{t}`")))
        .map(|r| r.map_err(|e| anyhow::Error::new(Error::Usage(e.to_string()))))
        .collect()
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Corpus(c) => stage(&c, Stage::Corpus),
        Command::Pretrain(c) => stage(&c, Stage::Pretrain),
        Command::Distill(c) => stage(&c, Stage::Distill),
        Command::Prune(c) => stage(&c, Stage::Prune),
        Command::Layerprune(c) => stage(&c, Stage::Layerprune),
        Command::Finetune(c) => stage(&c, Stage::Finetune),
        Command::Macs(c) => {
            let p = pipeline(&c)?;
            println!("{:<20} {:>16} {:>18} {:>10}", "model", "dense MACs", "effective MACs", "reduction");
            for (name, r) in p.macs()? {
                println!(
                    "{:<20} {:>16} {:>18.0} {:>9.2}%",
                    name,
                    r.dense_total,
                    r.effective_total,
                    100.0 * r.reduction_fraction
                );
            }
            eprintln!("wrote {}", p.layout.macs().display());
            Ok(())
        }
        Command::Bench(c) => {
            let p = pipeline(&c)?;
            let outcome = p.run_stage(Stage::Bench, c.force)?;
            report_outcome(Stage::Bench, outcome);
            print!("{}", std::fs::read_to_string(p.layout.report_txt())?);
            Ok(())
        }
        Command::Report { common, json } => {
            let p = pipeline(&common)?;
            let path = p.layout.report_json();
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    stage: "bench".into(),
                    path,
                }
                .into());
            }
            let report: BenchReport = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
            Ok(())
        }
        Command::Specdec {
            common,
            draft,
            target,
            prompt,
            k,
        } => {
            let p = pipeline(&common)?;
            let draft_path = if Path::new(&draft).exists() {
                PathBuf::from(&draft)
            } else {
                p.layout.fine_tuned(&draft)
            };
            let target_path = target.unwrap_or_else(|| p.layout.target());
            let draft = load(&draft_path)?.model;
            let target = load(&target_path)?.model;
            let mut tokens = vec![vocab::BOS];
            tokens.extend(parse_tokens(&prompt)?);
            tokens.push(vocab::SEP);
            let cfg = SpecDecodeConfig {
                k,
                max_new_tokens: p.config.specdec.max_new_tokens,
                eos_token: p.config.specdec.stop_at_eos.then_some(vocab::EOS),
            };
            let (out, stats) = speculative_decode(&draft, &target, &tokens, &cfg)?;
            println!("output: {}", vocab::describe(&out[tokens.len()..]));
            for (i, r) in stats.rounds.iter().enumerate() {
                println!(
                    "round {i:>3}: drafted {} accepted {} emitted {}",
                    r.drafted, r.accepted, r.emitted
                );
            }
            println!("MAL {:.3}", mean_accepted_length(&stats)?);
            Ok(())
        }
        Command::Run { common, stages } => {
            let p = pipeline(&common)?;
            let stages: Vec<Stage> = if stages.is_empty() {
                Stage::PIPELINE.to_vec()
            } else {
                stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
            };
            for (s, outcome) in p.run(&stages, common.force)? {
                report_outcome(s, outcome);
            }
            if stages.contains(&Stage::Bench) {
                print!("{}", std::fs::read_to_string(p.layout.report_txt())?);
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
