//! Learnable sampling distributions over discrete meta-actions.
//!
//! Every policy exposes its logits as one flat parameter vector so the
//! meta-optimizer can treat all policies alike, and gives the exact gradient
//! of `log p(action)` with respect to that vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of strength levels `{0, …, 30}`.
pub const STRENGTH_LEVELS: usize = 31;
/// Largest number of augmentations applied to one image.
pub const MAX_AUGMENTATIONS: usize = 4;

/// One augmentation slot of an [`ActionRecord::Augment`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugStep {
    /// Index into the augmentation registry.
    pub op: usize,
    pub keep: bool,
    /// Present iff `keep`.
    pub strength: Option<u8>,
}

/// Sampled meta-action for one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionRecord {
    Split {
        index: usize,
    },
    /// Augmentations in application order; `steps.len()` is the sampled count.
    Augment {
        steps: Vec<AugStep>,
    },
}

impl ActionRecord {
    pub fn count(&self) -> usize {
        match self {
            ActionRecord::Split { .. } => 1,
            ActionRecord::Augment { steps } => steps.len(),
        }
    }
}

/// A distribution over meta-actions with learnable logits.
pub trait Policy {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// `∇_params log p(action)`, same length as [`Policy::params`].
    fn log_prob_grad(&self, action: &ActionRecord) -> Result<Vec<f64>>;
    /// Named probabilities logged in training traces.
    fn probability_columns(&self) -> Vec<(String, f64)>;
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// "Inverted" softmax over data splits: `p_i = (1 - softmax(s)_i) / (N - 1)`.
///
/// Softmax concentrates mass on one winner; this concentrates the deficit on
/// one loser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub s: Vec<f64>,
}

impl SplitPolicy {
    pub fn new(splits: usize) -> Result<Self> {
        if splits < 2 {
            return Err(Error::Config(format!(
                "split policy needs at least 2 splits, got {splits}"
            )));
        }
        Ok(Self {
            s: vec![0.0; splits],
        })
    }

    pub fn from_logits(s: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(s.len())?;
        p.s = s;
        Ok(p)
    }

    pub fn splits(&self) -> usize {
        self.s.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        split_probs(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_logits(p.s)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<ActionRecord> {
        Ok(ActionRecord::Split {
            index: rng.categorical(&self.probs())?,
        })
    }
}

pub fn split_probs(policy: &SplitPolicy) -> Vec<f64> {
    let n = policy.s.len();
    let denom = (n - 1) as f64;
    softmax(&policy.s)
        .into_iter()
        .map(|q| (1.0 - q) / denom)
        .collect()
}

/// Exact `∇_s log p(s)_k`.
///
/// `log p_k = log(1 - q_k) - log(N - 1)` with `q = softmax(s)`, so
/// `∂/∂s_j = -q_k (δ_kj - q_j) / (1 - q_k)`.
pub fn split_log_prob_grad(policy: &SplitPolicy, index: usize) -> Result<Vec<f64>> {
    let n = policy.s.len();
    if index >= n {
        return Err(Error::Action(format!(
            "split {index} out of range for {n} splits"
        )));
    }
    let q = softmax(&policy.s);
    // 1 - q_k computed as the sum of the other entries to avoid cancellation
    let rest: f64 = q
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, v)| v)
        .sum();
    let ratio = q[index] / rest;
    Ok((0..n)
        .map(|j| {
            let delta = if j == index { 1.0 } else { 0.0 };
            -ratio * (delta - q[j])
        })
        .collect())
}

impl Policy for SplitPolicy {
    fn params(&self) -> &[f64] {
        &self.s
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.s
    }

    fn log_prob_grad(&self, action: &ActionRecord) -> Result<Vec<f64>> {
        match action {
            ActionRecord::Split { index } => split_log_prob_grad(self, *index),
            other => Err(Error::Action(format!(
                "split policy cannot score {other:?}"
            ))),
        }
    }

    fn probability_columns(&self) -> Vec<(String, f64)> {
        self.probs()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (format!("p_split_{i}"), p))
            .collect()
    }
}

/// Learned augmentation policy.
///
/// Count `r ∈ {1..4}` ~ `softmax(l_r)`; `r` distinct ops uniformly without
/// replacement; per op a keep flag ~ `sigmoid(l_d[op])` and, when kept, a
/// strength ~ `softmax(l_a[op])` over 31 levels.
///
/// Parameters are stored flat as `[l_r (4) | l_d (A) | l_a (A × 31)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OlaPolicy {
    ops: usize,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OlaJson {
    l_r: Vec<f64>,
    l_d: Vec<f64>,
    l_a: Vec<Vec<f64>>,
}

impl OlaPolicy {
    /// Zero-initialized policy over `ops` augmentations (needs at least 4).
    pub fn new(ops: usize) -> Result<Self> {
        if ops < MAX_AUGMENTATIONS {
            return Err(Error::Config(format!(
                "OLA needs at least {MAX_AUGMENTATIONS} augmentations, got {ops}"
            )));
        }
        Ok(Self {
            ops,
            params: vec![0.0; MAX_AUGMENTATIONS + ops + ops * STRENGTH_LEVELS],
        })
    }

    pub fn ops(&self) -> usize {
        self.ops
    }

    pub fn l_r(&self) -> &[f64] {
        &self.params[..MAX_AUGMENTATIONS]
    }

    pub fn l_d(&self) -> &[f64] {
        &self.params[MAX_AUGMENTATIONS..MAX_AUGMENTATIONS + self.ops]
    }

    pub fn l_d_mut(&mut self) -> &mut [f64] {
        &mut self.params[MAX_AUGMENTATIONS..MAX_AUGMENTATIONS + self.ops]
    }

    pub fn l_a(&self, op: usize) -> &[f64] {
        let start = self.l_a_offset(op);
        &self.params[start..start + STRENGTH_LEVELS]
    }

    fn l_a_offset(&self, op: usize) -> usize {
        MAX_AUGMENTATIONS + self.ops + op * STRENGTH_LEVELS
    }

    /// `p(r = j + 1)` for `j in 0..4`.
    pub fn count_probs(&self) -> Vec<f64> {
        softmax(self.l_r())
    }

    pub fn keep_probs(&self) -> Vec<f64> {
        self.l_d().iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn strength_probs(&self, op: usize) -> Vec<f64> {
        softmax(self.l_a(op))
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<ActionRecord> {
        ola_sample(self, rng)
    }

    /// `log p(action)` without the constant subset-choice term.
    pub fn log_prob(&self, action: &ActionRecord) -> Result<f64> {
        let steps = self.check_action(action)?;
        let mut lp = self.count_probs()[steps.len() - 1].ln();
        for s in steps {
            let pd = sigmoid(self.l_d()[s.op]);
            if s.keep {
                lp += pd.ln();
                lp += self.strength_probs(s.op)[s.strength.expect("checked") as usize].ln();
            } else {
                lp += (1.0 - pd).ln();
            }
        }
        Ok(lp)
    }

    fn check_action<'a>(&self, action: &'a ActionRecord) -> Result<&'a [AugStep]> {
        let ActionRecord::Augment { steps } = action else {
            return Err(Error::Action(format!("OLA policy cannot score {action:?}")));
        };
        if steps.is_empty() || steps.len() > MAX_AUGMENTATIONS {
            return Err(Error::Action(format!(
                "augmentation count {} outside 1..=4",
                steps.len()
            )));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.op >= self.ops {
                return Err(Error::Action(format!(
                    "op {} out of range for {} ops",
                    s.op, self.ops
                )));
            }
            if steps[..i].iter().any(|p| p.op == s.op) {
                return Err(Error::Action(format!("op {} chosen twice", s.op)));
            }
            match (s.keep, s.strength) {
                (true, Some(k)) if (k as usize) < STRENGTH_LEVELS => {}
                (false, None) => {}
                _ => {
                    return Err(Error::Action(format!(
                        "keep flag {} inconsistent with strength {:?}",
                        s.keep, s.strength
                    )))
                }
            }
        }
        Ok(steps)
    }

    pub fn to_json(&self) -> String {
        let doc = OlaJson {
            l_r: self.l_r().to_vec(),
            l_d: self.l_d().to_vec(),
            l_a: (0..self.ops).map(|a| self.l_a(a).to_vec()).collect(),
        };
        serde_json::to_string(&doc).expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: OlaJson = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let ops = doc.l_d.len();
        if doc.l_r.len() != MAX_AUGMENTATIONS
            || doc.l_a.len() != ops
            || doc.l_a.iter().any(|row| row.len() != STRENGTH_LEVELS)
        {
            return Err(Error::Config(
                "OLA policy document has inconsistent shapes".into(),
            ));
        }
        let mut p = Self::new(ops)?;
        p.params[..MAX_AUGMENTATIONS].copy_from_slice(&doc.l_r);
        p.l_d_mut().copy_from_slice(&doc.l_d);
        for (a, row) in doc.l_a.iter().enumerate() {
            let start = p.l_a_offset(a);
            p.params[start..start + STRENGTH_LEVELS].copy_from_slice(row);
        }
        Ok(p)
    }
}

/// Draws one augmentation action in the order count, ops, keep flags,
/// strengths.
pub fn ola_sample(policy: &OlaPolicy, rng: &mut Rng) -> Result<ActionRecord> {
    let r = rng.categorical(&policy.count_probs())? + 1;
    let ops = rng.choice_without_replacement(policy.ops, r)?;
    let mut steps = Vec::with_capacity(r);
    for op in ops {
        let keep = rng.bernoulli(sigmoid(policy.l_d()[op]));
        let strength = if keep {
            Some(rng.categorical(&policy.strength_probs(op))? as u8)
        } else {
            None
        };
        steps.push(AugStep { op, keep, strength });
    }
    Ok(ActionRecord::Augment { steps })
}

/// Exact `∇ log p(action)` over `[l_r | l_d | l_a]`.
pub fn ola_log_prob_grad(policy: &OlaPolicy, action: &ActionRecord) -> Result<Vec<f64>> {
    let steps = policy.check_action(action)?;
    let mut grad = vec![0.0; policy.params.len()];
    let pr = policy.count_probs();
    for (j, p) in pr.iter().enumerate() {
        grad[j] = if j + 1 == steps.len() { 1.0 - p } else { -p };
    }
    for s in steps {
        let pd = sigmoid(policy.l_d()[s.op]);
        grad[MAX_AUGMENTATIONS + s.op] = if s.keep { 1.0 - pd } else { -pd };
        if let Some(k) = s.strength {
            let start = policy.l_a_offset(s.op);
            for (j, p) in policy.strength_probs(s.op).iter().enumerate() {
                grad[start + j] = if j == k as usize { 1.0 - p } else { -p };
            }
        }
    }
    Ok(grad)
}

impl Policy for OlaPolicy {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn log_prob_grad(&self, action: &ActionRecord) -> Result<Vec<f64>> {
        ola_log_prob_grad(self, action)
    }

    fn probability_columns(&self) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> = self
            .count_probs()
            .into_iter()
            .enumerate()
            .map(|(j, p)| (format!("p_count_{}", j + 1), p))
            .collect();
        cols.extend(
            self.keep_probs()
                .into_iter()
                .enumerate()
                .map(|(a, p)| (format!("p_keep_{a}"), p)),
        );
        cols
    }
}

/// Fixed uniform baseline: two distinct ops, keep ~ Bern(0.5), strength
/// uniform over `0..=strength_cap`.
pub fn ua_sample(ops: usize, strength_cap: u8, rng: &mut Rng) -> Result<ActionRecord> {
    if ops < 2 {
        return Err(Error::Config(format!(
            "UA needs at least 2 augmentations, got {ops}"
        )));
    }
    let chosen = rng.choice_without_replacement(ops, 2)?;
    let steps = chosen
        .into_iter()
        .map(|op| {
            let keep = rng.bernoulli(0.5);
            let strength = keep.then(|| rng.below(strength_cap as usize + 1) as u8);
            AugStep { op, keep, strength }
        })
        .collect();
    Ok(ActionRecord::Augment { steps })
}
