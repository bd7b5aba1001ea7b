//! Noisy-splits experiment: a split policy learns which data splits to use
//! while one split carries random labels.

use inloop::data::make_noisy_splits;
use inloop::meta::{train_loop, RewardMode, SplitTask, Trace};
use inloop::policies::SplitPolicy;
use inloop::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{self, SynthKind};
use crate::error::{CliError, Result};
use crate::output::{run_dir, write_json, write_trace, Estimate};

/// Split usage of one run.
///
/// The AUC of split `i` is the time mean of `(S − 1)·p_i`, which lies in
/// `[0, 1]` under the inverted softmax; a uniform policy scores `(S − 1)/S`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitUsage {
    pub seed: u64,
    pub auc: Vec<f64>,
    pub mean_probs: Vec<f64>,
    pub auc_sum: f64,
    pub noisy_auc: f64,
    pub other_auc_mean: f64,
    pub meta_updates: usize,
    /// `series[t][i]` is `p_i` at logged step `t`.
    pub series: Vec<Vec<f64>>,
}

impl SplitUsage {
    pub fn from_trace(trace: &Trace, splits: usize, noisy_split: usize, seed: u64) -> Result<Self> {
        let columns = (0..splits)
            .map(|i| {
                trace
                    .column(&format!("p_split_{i}"))
                    .ok_or_else(|| CliError::Output(format!("trace has no column for split {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = trace.rows.len();
        if steps == 0 {
            return Err(CliError::Output("empty trace".into()));
        }
        let mean_probs: Vec<f64> = columns
            .iter()
            .map(|c| c.iter().sum::<f64>() / steps as f64)
            .collect();
        let scale = (splits - 1) as f64;
        let auc: Vec<f64> = mean_probs.iter().map(|p| scale * p).collect();
        let others: Vec<f64> = (0..splits)
            .filter(|&i| i != noisy_split)
            .map(|i| auc[i])
            .collect();
        Ok(Self {
            seed,
            auc_sum: auc.iter().sum(),
            noisy_auc: auc[noisy_split],
            other_auc_mean: others.iter().sum::<f64>() / others.len() as f64,
            meta_updates: trace.meta_updates(),
            series: trace.rows.iter().map(|r| r.probabilities.clone()).collect(),
            auc,
            mean_probs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageReport {
    pub mode: RewardMode,
    pub splits: usize,
    pub noisy_split: usize,
    pub steps: u64,
    pub auc: Vec<Estimate>,
    pub noisy_auc: Estimate,
    pub other_auc: Estimate,
    pub runs: Vec<SplitUsage>,
}

/// One seed: trains and returns the trace.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Trace> {
    let ds = dataset::load(cfg, SynthKind::Blobs, seed)?;
    let root = Rng::new(seed);
    let sds = make_noisy_splits(&ds, cfg.splits, cfg.noisy_split, &mut root.derive(&[1]))?;
    let net = dataset::network(cfg, &ds, &mut root.derive(&[2]))?;
    let mut task = SplitTask::new(sds, cfg.batch_size, root.derive(&[3]))?;
    let policy = SplitPolicy::new(cfg.splits)?;
    let out = train_loop(
        net,
        &mut task,
        policy,
        cfg.train_config(cfg.mode),
        cfg.steps,
    )?;
    Ok(out.trace)
}

/// All seeds; writes `trace.csv` per seed and `usage.json` at the root.
pub fn run_noisy_splits(cfg: &ExperimentConfig) -> Result<UsageReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in cfg.seeds() {
        let trace = run_seed(cfg, seed)?;
        write_trace(&trace, &run_dir(&cfg.out, seed, cfg.runs).join("trace.csv"))?;
        runs.push(SplitUsage::from_trace(
            &trace,
            cfg.splits,
            cfg.noisy_split,
            seed,
        )?);
    }
    let per =
        |f: &dyn Fn(&SplitUsage) -> f64| Estimate::of(&runs.iter().map(f).collect::<Vec<_>>());
    let report = UsageReport {
        mode: cfg.mode,
        splits: cfg.splits,
        noisy_split: cfg.noisy_split,
        steps: cfg.steps,
        auc: (0..cfg.splits).map(|i| per(&|u| u.auc[i])).collect(),
        noisy_auc: per(&|u| u.noisy_auc),
        other_auc: per(&|u| u.other_auc_mean),
        runs,
    };
    write_json(&report, &cfg.out.join("usage.json"))?;
    Ok(report)
}
