//! Experiment runner: noisy-split selection, learned augmentation, the
//! unbiasedness check and the overhead benchmark.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod noisy;
pub mod ola;
pub mod output;
pub mod overhead;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use inloop::meta::RewardMode;

pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "inloop", version, about = "In-loop meta-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn split usage with one label-noised split.
    NoisySplits(Overrides),
    /// Learned augmentation policy against the uniform baseline.
    Ola(Overrides),
    /// Check the expected update against finite differences.
    Verify(Overrides),
    /// Time plain, alignment-kernel and per-example-gradient steps.
    Overhead(Overrides),
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat JSON config; keys not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `synth` or `cifar10:<path>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// `gar`, `nslr` or `fixed`.
    #[arg(long)]
    pub mode: Option<String>,
}

impl Command {
    pub fn parts(&self) -> (Experiment, &Overrides) {
        match self {
            Command::NoisySplits(o) => (Experiment::NoisySplits, o),
            Command::Ola(o) => (Experiment::Ola, o),
            Command::Verify(o) => (Experiment::Verify, o),
            Command::Overhead(o) => (Experiment::Overhead, o),
        }
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve(experiment: Experiment, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(experiment, path)?,
        None => ExperimentConfig::defaults(experiment),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Some(dataset) = &o.dataset {
        cfg.dataset = dataset.clone();
    }
    if let Some(mode) = &o.mode {
        cfg.mode = mode
            .parse::<RewardMode>()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command and returns a one-paragraph summary.
pub fn run(cli: &Cli) -> Result<String> {
    let (experiment, overrides) = cli.command.parts();
    let cfg = resolve(experiment, overrides)?;
    let out = cfg.out.display();
    Ok(match experiment {
        Experiment::NoisySplits => {
            let r = noisy::run_noisy_splits(&cfg)?;
            format!(
                "{} over {} run(s): noisy-split AUC {:.3} ± {:.3}, other splits {:.3} ± {:.3}; wrote {out}/usage.json",
                r.mode,
                r.runs.len(),
                r.noisy_auc.mean,
                r.noisy_auc.ci95,
                r.other_auc.mean,
                r.other_auc.ci95
            )
        }
        Experiment::Ola => {
            let r = ola::run_ola(&cfg)?;
            let keep: Vec<String> = r
                .ops
                .iter()
                .zip(&r.keep)
                .map(|(name, k)| format!("{name} {:.2}", k.mean))
                .collect();
            format!(
                "keep probabilities: {}; test accuracy learned {:.3}, uniform {:.3}; wrote {out}/report.json",
                keep.join(", "),
                r.learned_accuracy.mean,
                r.uniform_accuracy.mean
            )
        }
        Experiment::Verify => {
            let r = verify::run_verify(&cfg)?;
            let errs: Vec<String> = r
                .points
                .iter()
                .map(|p| match p.rel_error {
                    Some(e) => format!("n={} {e:.2e}", p.batch_size),
                    None => format!("n={} -", p.batch_size),
                })
                .collect();
            format!(
                "relative error {}; final cosine {}; monotone {}; wrote {out}/report.json",
                errs.join(", "),
                r.final_cosine()
                    .map_or_else(|| "-".to_string(), |c| format!("{c:.6}")),
                r.monotone
            )
        }
        Experiment::Overhead => {
            let r = overhead::run_overhead(&cfg)?;
            format!(
                "step ms: baseline {:.3}, gar {:.3}, naive {:.3}; overhead gar {:.1}%, naive {:.1}%; wrote {out}/report.json",
                r.baseline_step_ms,
                r.gar_step_ms,
                r.naive_step_ms,
                100.0 * r.gar_overhead,
                100.0 * r.naive_overhead
            )
        }
    })
}
