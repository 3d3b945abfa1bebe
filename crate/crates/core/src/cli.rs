//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::data::{
    generate_synthetic, read_archive, split_dataset, write_archive, EmbeddingArchive, SplitPart,
    SyntheticConfig,
};
use crate::explain::explain;
use crate::gradcheck::{grad_check, CheckStatus, GradCheckOptions};
use crate::sweep::{parse_range, sweep};
use crate::training::{evaluate, train_with};

#[derive(Debug, Parser)]
#[command(
    name = "cffn",
    version,
    about = "Multimodal fake-news detector with consistency-aware fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic archive with planted cross-modal inconsistencies.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file; also seeds the split.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        /// Per-epoch history as JSON lines (defaults to stdout).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one part of the split it was trained with.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitPart,
        #[command(flatten)]
        ratios: SplitArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on one record.
    Gradcheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Record to probe; defaults to the first one in the archive.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a beta x lambda grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Base training config; the grid overrides beta and lambda.
        #[arg(long)]
        config: Option<PathBuf>,
        /// start:stop:step, inclusive
        #[arg(long, default_value = "0.2:1.0:0.2")]
        beta: String,
        #[arg(long, default_value = "0.0:0.3:0.1")]
        lambda: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "test")]
        eval_split: SplitPart,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Write a per-pair report for one post.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Threshold to explain with; defaults to the checkpoint's.
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// train,val,test fractions
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
}

impl SplitArgs {
    fn parse(&self) -> anyhow::Result<(f64, f64, f64)> {
        let parts = self
            .ratios
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("bad --ratios `{}`", self.ratios))?;
        match parts.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => bail!(
                "--ratios needs three comma-separated fractions, got `{}`",
                self.ratios
            ),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_train_config(path: &Path, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config =
        TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn open_archive(path: &Path) -> anyhow::Result<EmbeddingArchive> {
    read_archive(path).with_context(|| format!("reading archive {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::GenSynth { config, out, seed } => {
            let mut cfg: SyntheticConfig = read_json(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let records = generate_synthetic(&cfg)?;
            write_archive(&records, &out)?;
            writeln!(
                stdout,
                "wrote {} records to {}",
                records.len(),
                out.display()
            )?;
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            split,
            history,
        } => {
            let config = load_train_config(&config, seed)?;
            let archive = open_archive(&data)?;
            let split = split_dataset(&archive, split.parse()?, config.seed)?;
            let mut sink: Box<dyn Write> = match &history {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut write_err = None;
            let outcome = train_with(&archive, &split, &config, |record, _| {
                let line = serde_json::to_string(record).expect("epoch records serialize");
                if let Err(e) = writeln!(sink, "{line}") {
                    write_err = Some(e);
                    return true;
                }
                false
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing history");
            }
            sink.flush()?;
            save_checkpoint(&out, &config, &outcome.params)?;
            eprintln!("saved checkpoint to {}", out.display());
        }
        Command::Eval {
            data,
            ckpt,
            split,
            ratios,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let archive = open_archive(&data)?;
            let parts = split_dataset(&archive, ratios.parse()?, ck.config.seed)?;
            let metrics = evaluate(
                &ck.params,
                &archive,
                parts.part(split),
                ck.config.lambda,
                ck.config.variant,
            )?;
            writeln!(stdout, "accuracy {}", metrics.accuracy)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&metrics)?)?;
            if let Some(out) = out {
                write_json(&out, &metrics)?;
            }
        }
        Command::Gradcheck {
            ckpt,
            data,
            tol,
            step,
            samples,
            id,
            seed,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let archive = open_archive(&data)?;
            let post = match &id {
                Some(id) => archive.get(id)?,
                None => archive.records().first().context("archive is empty")?,
            };
            let opts = GradCheckOptions {
                step,
                tolerance: tol,
                samples_per_group: samples,
                seed,
                ..GradCheckOptions::default()
            };
            let params = ck.params.cast::<f64>();
            let report = grad_check(
                &params,
                post,
                ck.config.lambda,
                ck.config.effective_beta(),
                ck.config.variant,
                &opts,
            )?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            if report.status != CheckStatus::Pass {
                bail!(
                    "gradient check {:?}: max relative error {:e}",
                    report.status,
                    report.max_rel_error()
                );
            }
        }
        Command::Sweep {
            data,
            config,
            beta,
            lambda,
            out,
            seed,
            eval_split,
            split,
        } => {
            let mut base = match &config {
                Some(p) => load_train_config(p, seed)?,
                None => TrainConfig::new(10),
            };
            if let Some(seed) = seed {
                base.seed = seed;
            }
            let archive = open_archive(&data)?;
            let parts = split_dataset(&archive, split.parse()?, base.seed)?;
            let table = sweep(
                &archive,
                &parts,
                &base,
                &parse_range(&beta)?,
                &parse_range(&lambda)?,
                eval_split,
            )?;
            write_json(&out, &table)?;
            let failed = table.cells.iter().filter(|c| c.error.is_some()).count();
            writeln!(
                stdout,
                "{} cells written to {} ({failed} failed)",
                table.cells.len(),
                out.display()
            )?;
        }
        Command::Explain {
            ckpt,
            data,
            id,
            out,
            top_k,
            lambda,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let archive = open_archive(&data)?;
            let post = archive.get(&id)?;
            let report = explain(
                &ck.params,
                post,
                lambda.unwrap_or(ck.config.lambda),
                ck.config.variant,
                top_k,
            )?;
            write_json(&out, &report)?;
            writeln!(
                stdout,
                "{}: {} (prob_fake {:.4}), {} pairs",
                report.post_id,
                report.prediction,
                report.prob_fake,
                report.rows.len()
            )?;
        }
    }
    Ok(())
}
