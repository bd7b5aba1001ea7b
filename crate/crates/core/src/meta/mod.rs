//! In-loop meta-learning: the two-stream training loop, reward pipelines
//! and REINFORCE accumulation.
//!
//! Step `t` samples actions from the policy, trains on the resulting batch
//! and leaves a [`PendingStep`]. Step `t + 1` computes its own batch
//! gradient at `θ_{t+1}`, which doubles as the reference that scores the
//! pending step's examples. The policy only influences rewards through the
//! sampled actions, so no gradient flows from step `t`'s loss into `φ`.

mod tasks;
pub mod verify;

pub use tasks::{AugmentArm, AugmentTask, SplitTask};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galign;
use crate::nn::{
    self, adam_step, sgd_step, AdamConfig, AdamState, Gradients, LayerTape, Network, SgdConfig,
    SgdState,
};
use crate::policies::{ActionRecord, Policy};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-8;
const DEGENERATE_STD: f64 = 1e-12;

/// Which reward drives the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Per-example gradient alignment with the next step's batch gradient.
    Gar,
    /// Negated next-step batch loss, shared by the whole batch.
    Nslr,
    /// Policy never updated.
    Fixed,
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gar" => Ok(RewardMode::Gar),
            "nslr" => Ok(RewardMode::Nslr),
            "fixed" => Ok(RewardMode::Fixed),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}`, expected gar, nslr or fixed"
            ))),
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::Gar => "gar",
            RewardMode::Nslr => "nslr",
            RewardMode::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RawReward {
    PerExample(Vec<f64>),
    Scalar(f64),
}

/// Rewards for the examples of one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardBatch {
    pub step: u64,
    pub raw: RawReward,
    /// Per-example normalized rewards. Empty for NSLR, whose scalars are
    /// normalized across the aggregation window when it is flushed.
    pub normalized: Vec<f64>,
}

impl RewardBatch {
    /// Mean and population std of the raw rewards.
    pub fn raw_stats(&self) -> (f64, f64) {
        match &self.raw {
            RawReward::Scalar(r) => (*r, 0.0),
            RawReward::PerExample(r) => mean_std(r),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r − mean) / (std + 1e-8)` with the population std; all zeros when the
/// std is below `1e-12`.
pub fn normalize_rewards(raw: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(raw);
    if std < DEGENERATE_STD {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - mean) / (std + NORM_EPS)).collect()
}

/// Reward for the previous step: the negated batch loss at `θ_{t+1}`.
pub fn nslr_reward(next_batch_loss: f64) -> Result<f64> {
    if !next_batch_loss.is_finite() {
        return Err(Error::Reward(format!("non-finite loss {next_batch_loss}")));
    }
    Ok(-next_batch_loss)
}

/// Step `t`'s recorded state, waiting for step `t + 1`'s gradient.
#[derive(Clone, Debug)]
pub struct PendingStep {
    pub step: u64,
    /// Absent in NSLR mode, which needs no per-example information.
    pub tape: Option<LayerTape>,
    pub actions: Vec<ActionRecord>,
    /// `∇_φ log p(a_i)` at the `φ` the actions were sampled from.
    pub log_prob_grads: Vec<Vec<f64>>,
}

/// GAR rewards of a pending step against the next batch gradient.
pub fn gar_rewards(pending: &PendingStep, next_batch_grads: &Gradients) -> Result<RewardBatch> {
    let tape = pending.tape.as_ref().ok_or_else(|| {
        Error::Reward(format!("step {} was recorded without a tape", pending.step))
    })?;
    let raw = galign::assemble_alignment(tape, next_batch_grads)?.rewards;
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::Reward(format!(
            "non-finite GAR reward at step {}",
            pending.step
        )));
    }
    let normalized = normalize_rewards(&raw);
    Ok(RewardBatch {
        step: pending.step,
        raw: RawReward::PerExample(raw),
        normalized,
    })
}

/// `Σ_i r_i · ∇ log p(a_i)`, the REINFORCE estimate of the reward's
/// gradient (an ascent direction).
pub fn reinforce_gradient(rewards: &[f64], log_prob_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rewards.len() != log_prob_grads.len() {
        return Err(Error::Reward(format!(
            "{} rewards for {} actions",
            rewards.len(),
            log_prob_grads.len()
        )));
    }
    let len = log_prob_grads.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    for (r, g) in rewards.iter().zip(log_prob_grads) {
        if g.len() != len {
            return Err(Error::Reward("log-prob gradients differ in length".into()));
        }
        if *r != 0.0 {
            for (o, gi) in out.iter_mut().zip(g) {
                *o += r * gi;
            }
        }
    }
    Ok(out)
}

/// Sums REINFORCE gradients over a window of steps and applies them with
/// Adam once the window is full.
///
/// The stored gradient is the one Adam minimizes, `−Σ r_i ∇ log p(a_i)`.
#[derive(Clone, Debug)]
pub struct MetaAccumulator {
    grad: Vec<f64>,
    steps: usize,
    window: usize,
    /// NSLR scalars and score sums, normalized across the window at flush.
    scalars: Vec<(f64, Vec<f64>)>,
    adam: AdamConfig,
    state: AdamState,
}

impl MetaAccumulator {
    pub fn new(param_len: usize, window: usize, adam: AdamConfig) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("aggregation window must be positive".into()));
        }
        adam.validate()?;
        Ok(Self {
            grad: vec![0.0; param_len],
            steps: 0,
            window,
            scalars: Vec::new(),
            adam,
            state: AdamState::default(),
        })
    }

    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    pub fn steps_accumulated(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.state
    }

    /// Adds `−Σ r̂_i ∇ log p(a_i)` for a step's normalized rewards.
    pub fn accumulate(&mut self, rewards: &RewardBatch, log_prob_grads: &[Vec<f64>]) -> Result<()> {
        let g = reinforce_gradient(&rewards.normalized, log_prob_grads)?;
        self.add_negated(&g)?;
        self.steps += 1;
        Ok(())
    }

    /// Buffers one NSLR step: its scalar reward and `Σ_i ∇ log p(a_i)`.
    pub fn accumulate_scalar(&mut self, reward: f64, score_sum: Vec<f64>) -> Result<()> {
        if score_sum.len() != self.grad.len() {
            return Err(Error::Reward(format!(
                "score sum has {} entries for {} parameters",
                score_sum.len(),
                self.grad.len()
            )));
        }
        self.scalars.push((reward, score_sum));
        self.steps += 1;
        Ok(())
    }

    fn add_negated(&mut self, g: &[f64]) -> Result<()> {
        if g.is_empty() {
            return Ok(());
        }
        if g.len() != self.grad.len() {
            return Err(Error::Reward(format!(
                "gradient has {} entries for {} parameters",
                g.len(),
                self.grad.len()
            )));
        }
        for (a, gi) in self.grad.iter_mut().zip(g) {
            *a -= gi;
        }
        Ok(())
    }

    /// When the window is full: applies one Adam step to `params` unless the
    /// accumulated gradient is exactly zero, then resets. Returns whether
    /// `params` changed.
    pub fn flush_if_due(&mut self, params: &mut [f64]) -> Result<bool> {
        if self.steps < self.window {
            return Ok(false);
        }
        if !self.scalars.is_empty() {
            let raw: Vec<f64> = self.scalars.iter().map(|(r, _)| *r).collect();
            let normalized = normalize_rewards(&raw);
            let scores: Vec<Vec<f64>> = self.scalars.drain(..).map(|(_, s)| s).collect();
            let g = reinforce_gradient(&normalized, &scores)?;
            self.add_negated(&g)?;
        }
        let applied = self.grad.iter().any(|&g| g != 0.0);
        if applied {
            adam_step(params, &self.grad, &self.adam, &mut self.state)?;
        }
        self.grad.fill(0.0);
        self.steps = 0;
        Ok(applied)
    }
}

/// Inputs for one training step. `actions` is `None` on plain steps that
/// did not sample from the policy.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub actions: Option<Vec<ActionRecord>>,
}

/// Produces training batches, sampling meta-actions from the policy.
pub trait MetaTask<P: Policy> {
    fn batch(&mut self, step: u64, policy: &P) -> Result<StepBatch>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: RewardMode,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Gar,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            window: 10,
        }
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub batch_loss: f64,
    /// Policy probabilities the step's actions were sampled from.
    pub probabilities: Vec<f64>,
    /// Raw statistics of the rewards resolved during this step.
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
    pub meta_update_applied: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub probability_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "batch_loss".to_string()];
        h.extend(self.probability_names.iter().cloned());
        h.extend(["reward_mean", "reward_std", "meta_update_applied"].map(String::from));
        h
    }

    /// Rows as text fields matching [`Trace::header`]; absent rewards are
    /// empty fields.
    pub fn records(&self) -> impl Iterator<Item = Vec<String>> + '_ {
        self.rows.iter().map(|r| {
            let mut rec = vec![r.step.to_string(), r.batch_loss.to_string()];
            rec.extend(r.probabilities.iter().map(f64::to_string));
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            rec.push(opt(r.reward_mean));
            rec.push(opt(r.reward_std));
            rec.push(u8::from(r.meta_update_applied).to_string());
            rec
        })
    }

    pub fn meta_updates(&self) -> usize {
        self.rows.iter().filter(|r| r.meta_update_applied).count()
    }

    /// Time series of one probability column.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.probability_names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.probabilities[j]).collect())
    }
}

/// What a single [`MetaTrainer::step`] did.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub row: TraceRow,
    /// Rewards of the pending step resolved by this step, if any.
    pub rewards: Option<RewardBatch>,
}

/// Owns the network, the policy and all optimizer state of one run.
pub struct MetaTrainer<P: Policy> {
    net: Network,
    policy: P,
    cfg: TrainConfig,
    sgd_state: SgdState,
    acc: MetaAccumulator,
    pending: Option<PendingStep>,
    step: u64,
    trace: Trace,
}

impl<P: Policy> MetaTrainer<P> {
    pub fn new(net: Network, policy: P, cfg: TrainConfig) -> Result<Self> {
        cfg.sgd.validate()?;
        let acc = MetaAccumulator::new(policy.params().len(), cfg.window, cfg.adam)?;
        let probability_names = policy
            .probability_columns()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        Ok(Self {
            net,
            policy,
            cfg,
            sgd_state: SgdState::default(),
            acc,
            pending: None,
            step: 0,
            trace: Trace {
                probability_names,
                rows: Vec::new(),
            },
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    /// Direct access to the policy between steps.
    pub fn policy_mut(&mut self) -> &mut P {
        &mut self.policy
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn pending(&self) -> Option<&PendingStep> {
        self.pending.as_ref()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_parts(self) -> (Network, P, Trace) {
        (self.net, self.policy, self.trace)
    }

    /// Runs one step of the loop.
    pub fn step<T: MetaTask<P> + ?Sized>(&mut self, task: &mut T) -> Result<StepOutcome> {
        let t = self.step;
        let probabilities: Vec<f64> = self
            .policy
            .probability_columns()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let batch = task.batch(t, &self.policy)?;
        let meta_step = batch.actions.is_some() && self.cfg.mode != RewardMode::Fixed;

        let log_prob_grads = match (&batch.actions, meta_step) {
            (Some(actions), true) => {
                if actions.len() != batch.labels.len() {
                    return Err(Error::Action(format!(
                        "{} actions for a batch of {}",
                        actions.len(),
                        batch.labels.len()
                    )));
                }
                actions
                    .iter()
                    .map(|a| self.policy.log_prob_grad(a))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => Vec::new(),
        };

        let (loss, grads, tape) = if meta_step && self.cfg.mode == RewardMode::Gar {
            let b = nn::loss_and_backward(&self.net, &batch.inputs, &batch.labels)?;
            (b.loss, b.grads, Some(b.tape))
        } else {
            let (loss, grads) = nn::loss_and_grads(&self.net, &batch.inputs, &batch.labels)?;
            (loss, grads, None)
        };
        if !loss.is_finite() {
            return Err(Error::Reward(format!("non-finite batch loss at step {t}")));
        }

        let mut rewards = None;
        if let Some(pending) = self.pending.take() {
            match self.cfg.mode {
                RewardMode::Gar => {
                    let rb = gar_rewards(&pending, &grads)?;
                    self.acc.accumulate(&rb, &pending.log_prob_grads)?;
                    rewards = Some(rb);
                }
                RewardMode::Nslr => {
                    let r = nslr_reward(loss)?;
                    let ones = vec![1.0; pending.log_prob_grads.len()];
                    let score_sum = reinforce_gradient(&ones, &pending.log_prob_grads)?;
                    self.acc.accumulate_scalar(r, score_sum)?;
                    rewards = Some(RewardBatch {
                        step: pending.step,
                        raw: RawReward::Scalar(r),
                        normalized: Vec::new(),
                    });
                }
                RewardMode::Fixed => {}
            }
        }
        let applied = self.acc.flush_if_due(self.policy.params_mut())?;

        sgd_step(&mut self.net, &grads, &self.cfg.sgd, &mut self.sgd_state)?;

        if meta_step {
            self.pending = Some(PendingStep {
                step: t,
                tape,
                actions: batch.actions.expect("meta step has actions"),
                log_prob_grads,
            });
        }

        let (reward_mean, reward_std) = match &rewards {
            Some(rb) => {
                let (m, s) = rb.raw_stats();
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        let row = TraceRow {
            step: t,
            batch_loss: loss,
            probabilities,
            reward_mean,
            reward_std,
            meta_update_applied: applied,
        };
        self.trace.rows.push(row.clone());
        self.step += 1;
        Ok(StepOutcome { row, rewards })
    }

    pub fn run<T: MetaTask<P> + ?Sized>(&mut self, task: &mut T, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step(task)?;
        }
        Ok(())
    }
}

/// Result of [`train_loop`].
pub struct TrainOutput<P> {
    pub net: Network,
    pub policy: P,
    pub trace: Trace,
}

/// Trains for `steps ≥ 2` steps.
pub fn train_loop<P: Policy, T: MetaTask<P> + ?Sized>(
    net: Network,
    task: &mut T,
    policy: P,
    cfg: TrainConfig,
    steps: u64,
) -> Result<TrainOutput<P>> {
    if steps < 2 {
        return Err(Error::Config(format!("need at least 2 steps, got {steps}")));
    }
    let mut trainer = MetaTrainer::new(net, policy, cfg)?;
    trainer.run(task, steps)?;
    let (net, policy, trace) = trainer.into_parts();
    Ok(TrainOutput { net, policy, trace })
}

#[cfg(test)]
mod tests;
