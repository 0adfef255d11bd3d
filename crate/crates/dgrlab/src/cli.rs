//! Subcommands behind the `dgrlab` binary.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dgrlab_core::eval::{evaluate, EvalReport};
use dgrlab_core::model::{DgrModel, LoadMode};
use dgrlab_core::rng;
use dgrlab_core::synth::SeedSpace;
use dgrlab_core::train::{FinetuneScope, Finetuner, Pretrainer};
use log::info;

use crate::config::RunConfig;
use crate::exec::Pool;
use crate::io::{self, LossLog};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "dgrlab", version, about = "Distortion graph representation learning for blind image quality assessment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

/// Where finetuning starts from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Random,
    Checkpoint(PathBuf),
}

impl FromStr for Source {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "random" {
            Source::Random
        } else {
            Source::Checkpoint(PathBuf::from(s))
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain backbone, graph builder and both heads; writes a checkpoint
    /// and a per-step loss log.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = "dgrlab-out")]
        out: PathBuf,
    },
    /// Finetune for score regression and write the final report.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint, or `random` for a fresh initialization.
        #[arg(long = "from", value_name = "PATH|random")]
        from: Source,
        #[arg(long, value_name = "DIR", default_value = "dgrlab-out")]
        out: PathBuf,
        /// Train only the regression head on frozen representations. With
        /// `head_hidden = 0` this is the linear probe.
        #[arg(long)]
        head_only: bool,
    },
    /// Evaluate a checkpoint and print the report as JSON on stdout.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also write a manifest and the report into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write node and edge CSVs of one fresh graph per distortion type.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write synthetic samples as PNG files with an index CSV.
    ExportDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
}

fn load_config(common: &Common) -> anyhow::Result<(RunConfig, Vec<u8>)> {
    let (cfg, bytes) = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), Vec::new()),
    };
    Ok(match common.seed {
        Some(s) => (cfg.with_seed(s), bytes),
        None => (cfg, bytes),
    })
}

/// Creates `out`, writes the running manifest, runs `body` and records
/// how it ended.
fn with_manifest<T>(
    name: &str,
    common: &Common,
    cfg: &RunConfig,
    bytes: &[u8],
    out: &Path,
    body: impl FnOnce() -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    io::ensure_dir(out)?;
    let mut manifest = RunManifest::start(name, common.config.as_deref(), bytes, cfg.train.seed, out);
    manifest.write().context("writing the run manifest")?;
    let result = body();
    manifest
        .finish(result.as_ref().map(|_| ()).map_err(|e| format!("{e:#}")))
        .context("finalizing the run manifest")?;
    result
}

fn run_evaluation(model: &DgrModel, cfg: &RunConfig, step: usize, pool: &Pool) -> anyhow::Result<EvalReport> {
    let synth = cfg.train.synth()?;
    Ok(evaluate(model, &synth, cfg.train.graph_size, &cfg.eval, step, pool)?)
}

pub fn pretrain(cfg: &RunConfig, out: &Path, pool: &Pool) -> anyhow::Result<DgrModel> {
    let mut trainer = Pretrainer::new(cfg.model.clone(), cfg.train.clone())?;
    let mut log = LossLog::pretrain(&out.join(io::PRETRAIN_LOG))?;
    let steps = cfg.train.pretrain_steps;
    let every = cfg.train.eval_every;
    if every > 0 {
        std::fs::create_dir_all(out.join("reports"))?;
    }
    for s in 1..=steps {
        let b = trainer.step()?;
        log.bundle(s, &b)?;
        if s % 100 == 0 || s == steps {
            info!("pretrain step {s}/{steps}: l_dist={:.5} l_level={:.4} total={:.5}", b.l_dist, b.l_level, b.total);
        }
        if every > 0 && (s % every == 0 || s == steps) {
            log.flush()?;
            let report = run_evaluation(&trainer.model, cfg, s, pool)?;
            io::write_report(&out.join("reports").join(format!("step_{s:06}.json")), &report)?;
        }
    }
    log.flush()?;
    io::save_checkpoint(&trainer.model, &out.join(io::CHECKPOINT_FILE))?;
    Ok(trainer.model)
}

pub fn finetune(
    cfg: &RunConfig,
    from: &Source,
    scope: FinetuneScope,
    out: &Path,
    pool: &Pool,
) -> anyhow::Result<(DgrModel, EvalReport)> {
    let seed = cfg.train.seed;
    let model = match from {
        Source::Random => DgrModel::new(cfg.model.clone(), seed)?,
        Source::Checkpoint(p) => io::load_checkpoint(p, &cfg.model, LoadMode::Representation, seed)?,
    };
    let mut trainer = Finetuner::new(model, cfg.train.clone(), scope)?;
    let mut log = LossLog::finetune(&out.join(io::FINETUNE_LOG))?;
    let steps = cfg.train.finetune_steps;
    for s in 1..=steps {
        let loss = trainer.step()?;
        log.row(s, &[loss])?;
        if s % 100 == 0 || s == steps {
            info!("finetune step {s}/{steps}: mse={loss:.5}");
        }
    }
    log.flush()?;
    io::save_checkpoint(&trainer.model, &out.join(io::CHECKPOINT_FILE))?;
    let report = run_evaluation(&trainer.model, cfg, steps, pool)?;
    io::write_report(&out.join(io::REPORT_FILE), &report)?;
    Ok((trainer.model, report))
}

pub fn export_embeddings(model: &DgrModel, cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let synth = cfg.train.synth()?;
    let mut written = Vec::new();
    for spec in synth.specs() {
        let t = spec.type_id;
        let mut r = rng::stream(rng::derive(cfg.eval.seed, t as u64), rng::salt::EVAL);
        let batch = synth.sample_type_batch(t, cfg.train.graph_size, SeedSpace::HeldOut, &mut r)?;
        let g = io::materialize(model, &batch, Some(t))?;
        let stem = format!("type{t}_{}", spec.family.name());
        let nodes = out.join(format!("nodes_{stem}.csv"));
        let edges = out.join(format!("edges_{stem}.csv"));
        io::write_node_csv(&nodes, &g, &batch)?;
        io::write_edge_csv(&edges, &g)?;
        written.push(nodes);
        written.push(edges);
    }
    Ok(written)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = Pool::from_env()?;
    match cli.command {
        Command::Pretrain { common, out } => {
            let (cfg, bytes) = load_config(&common)?;
            with_manifest("pretrain", &common, &cfg, &bytes, &out, || pretrain(&cfg, &out, &pool).map(|_| ()))?;
            info!("wrote {}", out.join(io::CHECKPOINT_FILE).display());
        }
        Command::Finetune {
            common,
            from,
            out,
            head_only,
        } => {
            let (cfg, bytes) = load_config(&common)?;
            let scope = if head_only { FinetuneScope::HeadOnly } else { FinetuneScope::Full };
            let (_, report) = with_manifest("finetune", &common, &cfg, &bytes, &out, || {
                finetune(&cfg, &from, scope, &out, &pool)
            })?;
            println!("{}", io::report_json(&report));
        }
        Command::Eval {
            common,
            checkpoint,
            out,
        } => {
            let (cfg, bytes) = load_config(&common)?;
            let body = || -> anyhow::Result<EvalReport> {
                let model = io::load_checkpoint(&checkpoint, &cfg.model, LoadMode::Full, cfg.train.seed)?;
                run_evaluation(&model, &cfg, 0, &pool)
            };
            let report = match &out {
                Some(dir) => with_manifest("eval", &common, &cfg, &bytes, dir, || {
                    let r = body()?;
                    io::write_report(&dir.join(io::REPORT_FILE), &r)?;
                    Ok(r)
                })?,
                None => body()?,
            };
            println!("{}", io::report_json(&report));
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            out,
        } => {
            let (cfg, bytes) = load_config(&common)?;
            with_manifest("export-embeddings", &common, &cfg, &bytes, &out, || {
                let model = io::load_checkpoint(&checkpoint, &cfg.model, LoadMode::Representation, cfg.train.seed)?;
                let files = export_embeddings(&model, &cfg, &out)?;
                info!("wrote {} CSV files to {}", files.len(), out.display());
                Ok(())
            })?;
        }
        Command::ExportDataset { common, out, count } => {
            let (cfg, bytes) = load_config(&common)?;
            with_manifest("export-dataset", &common, &cfg, &bytes, &out, || {
                let synth = cfg.train.synth()?;
                let mut r = rng::stream(cfg.train.seed, rng::salt::CONTENT);
                let samples = synth.sample_mixed_batch(count, SeedSpace::Train, &mut r)?;
                let index = io::export_dataset(&out, &samples)?;
                info!("wrote {count} samples, index at {}", index.display());
                Ok(())
            })?;
        }
    }
    Ok(())
}
