//! Online-learned augmentation against the uniform baseline.

use inloop::augment::Registry;
use inloop::data::Dataset;
use inloop::meta::{train_loop, AugmentArm, AugmentTask, RewardMode, Trace};
use inloop::nn::{accuracy, Network};
use inloop::policies::{OlaPolicy, Policy};
use inloop::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{self, SynthKind};
use crate::error::{CliError, Result};
use crate::output::{run_dir, write_json, write_trace, Estimate};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpSummary {
    pub name: String,
    pub keep: f64,
    pub mean_strength: f64,
    pub strength_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmReport {
    pub test_accuracy: f64,
    pub meta_updates: usize,
    pub policy_changed: bool,
    pub count_probs: Vec<f64>,
    pub ops: Vec<OpSummary>,
}

impl ArmReport {
    /// Final keep probability of the named op.
    pub fn keep(&self, name: &str) -> Option<f64> {
        self.ops.iter().find(|o| o.name == name).map(|o| o.keep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OlaRun {
    pub seed: u64,
    pub learned: ArmReport,
    pub uniform: ArmReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OlaReport {
    pub mode: RewardMode,
    pub steps: u64,
    pub ops: Vec<String>,
    pub learned_accuracy: Estimate,
    pub uniform_accuracy: Estimate,
    /// Final keep probability per op over runs, in registry order.
    pub keep: Vec<Estimate>,
    pub runs: Vec<OlaRun>,
}

struct Split {
    train: Dataset,
    test: Dataset,
}

fn split(cfg: &ExperimentConfig, seed: u64) -> Result<Split> {
    let ds = dataset::load(cfg, SynthKind::Images, seed)?;
    if cfg.test_examples >= ds.len() {
        return Err(CliError::Config(format!(
            "test_examples {} leaves no training data out of {}",
            cfg.test_examples,
            ds.len()
        )));
    }
    let (train, test) = ds.split_off(
        ds.len() - cfg.test_examples,
        &mut Rng::new(seed).derive(&[1]),
    );
    Ok(Split { train, test })
}

fn arm(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &Split,
    registry: &Registry,
    net: Network,
    which: AugmentArm,
) -> Result<(Trace, ArmReport)> {
    let mode = match which {
        AugmentArm::Learned => cfg.mode,
        AugmentArm::Uniform { .. } => RewardMode::Fixed,
    };
    let mut task = AugmentTask::new(
        data.train.clone(),
        registry.clone(),
        cfg.batch_size,
        which,
        Rng::new(seed).derive(&[3]).seed(),
    )?;
    let initial = OlaPolicy::new(registry.len())?;
    let out = train_loop(
        net,
        &mut task,
        initial.clone(),
        cfg.train_config(mode),
        cfg.steps,
    )?;
    let policy = &out.policy;
    let keep = policy.keep_probs();
    let ops = registry
        .names()
        .into_iter()
        .enumerate()
        .map(|(a, name)| {
            let strength_probs = policy.strength_probs(a);
            OpSummary {
                name: name.to_string(),
                keep: keep[a],
                mean_strength: strength_probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| k as f64 * p)
                    .sum(),
                strength_probs,
            }
        })
        .collect();
    let report = ArmReport {
        test_accuracy: accuracy(&out.net, data.test.images(), data.test.labels())?,
        meta_updates: out.trace.meta_updates(),
        policy_changed: policy.params() != initial.params(),
        count_probs: policy.count_probs(),
        ops,
    };
    Ok((out.trace, report))
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(OlaRun, Trace, Trace)> {
    let registry = cfg.registry()?;
    if registry.len() < 4 || registry.index_of("gaussian_noise_canary").is_err() {
        return Err(CliError::Config(
            "ola needs at least 4 augmentations including gaussian_noise_canary".into(),
        ));
    }
    let data = split(cfg, seed)?;
    let net = dataset::network(cfg, &data.train, &mut Rng::new(seed).derive(&[2]))?;
    let (learned_trace, learned) = arm(
        cfg,
        seed,
        &data,
        &registry,
        net.clone(),
        AugmentArm::Learned,
    )?;
    let (uniform_trace, uniform) = arm(
        cfg,
        seed,
        &data,
        &registry,
        net,
        AugmentArm::Uniform {
            strength_cap: cfg.strength_cap,
        },
    )?;
    Ok((
        OlaRun {
            seed,
            learned,
            uniform,
        },
        learned_trace,
        uniform_trace,
    ))
}

/// All seeds; writes `learned/trace.csv` and `uniform/trace.csv` per seed
/// and `report.json` at the root.
pub fn run_ola(cfg: &ExperimentConfig) -> Result<OlaReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in cfg.seeds() {
        let (run, learned, uniform) = run_seed(cfg, seed)?;
        let dir = run_dir(&cfg.out, seed, cfg.runs);
        write_trace(&learned, &dir.join("learned").join("trace.csv"))?;
        write_trace(&uniform, &dir.join("uniform").join("trace.csv"))?;
        runs.push(run);
    }
    let ops = cfg.augmentations.clone();
    let per = |f: &dyn Fn(&OlaRun) -> f64| Estimate::of(&runs.iter().map(f).collect::<Vec<_>>());
    let report = OlaReport {
        mode: cfg.mode,
        steps: cfg.steps,
        learned_accuracy: per(&|r| r.learned.test_accuracy),
        uniform_accuracy: per(&|r| r.uniform.test_accuracy),
        keep: (0..ops.len())
            .map(|a| per(&|r| r.learned.ops[a].keep))
            .collect(),
        ops,
        runs,
    };
    write_json(&report, &cfg.out.join("report.json"))?;
    Ok(report)
}
