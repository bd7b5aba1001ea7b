//! Exact check that the expected GAR update matches the meta-gradient.
//!
//! A tiny problem has `K` actions, each standing for one training example.
//! A batch of `n` actions is summarized by its counts `c` (a composition of
//! `n` into `K` parts), drawn from a multinomial under the policy. For every
//! `c` the inner step `θ(c) = θ_t − α Σ_a (c_a / n) ∇ℓ_a` and the validation
//! gradient at `θ(c)` are computed exactly, which gives
//!
//! * the expected GAR update `−(α/n) · E[Σ_i r_i ∇ log p(a_i)]`, using the
//!   alignment kernels on the per-action tape, and
//! * the meta-gradient `∇_φ E[L_val(θ(c))]`, by central differences over
//!   `φ` of the same exact expectation.
//!
//! Both converge to `−α Σ_a ∇p_a ⟨∇ℓ_a, ∇L_val(θ_∞)⟩` as `n` grows.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::galign::assemble_alignment;
use crate::nn::{self, Gradients, LayerSpec, Network};
use crate::par;
use crate::policies::{split_log_prob_grad, Policy, SplitPolicy};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest action space the verifier enumerates.
pub const MAX_ACTIONS: usize = 8;
/// Largest network the verifier accepts.
pub const MAX_PARAMS: usize = 50;
const MAX_COMPOSITIONS: u128 = 2_000_000;
const ZERO_NORM: f64 = 1e-12;

/// A fixed `θ_t`, one training example per action, a validation set and a
/// split policy over the actions.
#[derive(Clone, Debug)]
pub struct VerifyProblem {
    pub net: Network,
    /// `K × d`, row `a` is action `a`'s training example.
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub validation: Tensor,
    pub validation_labels: Vec<usize>,
    pub policy: SplitPolicy,
    /// Inner SGD step size `α`.
    pub step_size: f64,
    pub batch_sizes: Vec<usize>,
    pub fd_step: f64,
}

impl VerifyProblem {
    /// Three actions on a 3→4→2 ReLU network (26 parameters). Action 0
    /// trains on a flipped label; the validation set holds all three inputs
    /// with their true labels.
    pub fn tiny(seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let specs: Vec<LayerSpec> = ["linear:4", "bias", "relu", "linear:2", "bias"]
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()?;
        let net = Network::from_specs(&[3], &specs, &mut rng)?;
        let examples = Tensor::new([3, 3], (0..9).map(|_| rng.normal()).collect())?;
        let truth = vec![0, 1, 0];
        Ok(Self {
            net,
            validation: examples.clone(),
            examples,
            labels: vec![1, 1, 0],
            validation_labels: truth,
            policy: SplitPolicy::from_logits(vec![0.3, -0.2, 0.1])?,
            step_size: 0.5,
            batch_sizes: vec![4, 16, 64, 256],
            fd_step: 1e-5,
        })
    }

    /// Like [`VerifyProblem::tiny`] but every action is the same example, so
    /// the policy cannot affect the outcome.
    pub fn no_effect(seed: u64) -> Result<Self> {
        let mut p = Self::tiny(seed)?;
        let row = p.examples.row(0).to_vec();
        p.examples = Tensor::new([3, 3], row.repeat(3))?;
        p.labels = vec![1, 1, 1];
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyPoint {
    pub batch_size: usize,
    pub compositions: usize,
    /// `−(α/n) · E[Σ_i r_i ∇ log p(a_i)]`.
    pub gar_update: Vec<f64>,
    /// Central-difference `∇_φ E[L_val(θ_{t+1})]` at this batch size.
    pub meta_gradient: Vec<f64>,
    /// `None` when either vector is numerically zero.
    pub cosine: Option<f64>,
    /// `‖gar − meta‖ / ‖meta‖`; `None` when the meta-gradient is zero.
    pub rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub actions: usize,
    pub param_count: usize,
    pub step_size: f64,
    pub points: Vec<VerifyPoint>,
    /// Central-difference gradient of the infinite-batch objective
    /// `L_val(θ_t − α Σ_a p_a ∇ℓ_a)`.
    pub infinite_batch_gradient: Vec<f64>,
    /// Batch-size steps where the relative error grew.
    pub inversions: usize,
    /// Relative error non-increasing up to one inversion of at most 5%.
    pub monotone: bool,
}

impl VerifyReport {
    pub fn final_cosine(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.cosine)
    }
}

pub fn verify_unbiasedness(problem: &VerifyProblem) -> Result<VerifyReport> {
    let k = problem.policy.splits();
    if k > MAX_ACTIONS {
        return Err(Error::Verifier(format!(
            "{k} actions exceed the enumerable limit {MAX_ACTIONS}"
        )));
    }
    if problem.examples.rows() != k || problem.labels.len() != k {
        return Err(Error::Verifier(format!(
            "{k} actions need {k} examples and labels, got {} and {}",
            problem.examples.rows(),
            problem.labels.len()
        )));
    }
    let param_count = problem.net.param_count();
    if param_count > MAX_PARAMS {
        return Err(Error::Verifier(format!(
            "{param_count} parameters exceed {MAX_PARAMS}"
        )));
    }
    if problem.batch_sizes.is_empty() || problem.batch_sizes.contains(&0) {
        return Err(Error::Verifier("batch sizes must be positive".into()));
    }
    for &n in &problem.batch_sizes {
        let count = composition_count(n, k);
        if count > MAX_COMPOSITIONS {
            return Err(Error::Verifier(format!(
                "batch size {n} over {k} actions has {count} compositions, limit {MAX_COMPOSITIONS}"
            )));
        }
    }
    if !(problem.fd_step > 0.0) || !(problem.step_size > 0.0) {
        return Err(Error::Verifier("step sizes must be positive".into()));
    }

    let action_grads = nn::per_example_grads(&problem.net, &problem.examples, &problem.labels)?;
    let tape = nn::loss_and_backward(&problem.net, &problem.examples, &problem.labels)?.tape;
    let probs = problem.policy.probs();
    let scores = (0..k)
        .map(|a| split_log_prob_grad(&problem.policy, a))
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(problem.batch_sizes.len());
    for &n in &problem.batch_sizes {
        let comps = compositions(n, k);
        let log_fact = log_factorials(n);
        let outcomes: Vec<Result<(f64, Vec<f64>)>> = par::map_range(comps.len(), |ci| {
            let c = &comps[ci];
            let weights: Vec<f64> = c.iter().map(|&ca| ca as f64 / n as f64).collect();
            let next = inner_step(&problem.net, &action_grads, &weights, problem.step_size)?;
            let (val_loss, val_grads) =
                nn::loss_and_grads(&next, &problem.validation, &problem.validation_labels)?;
            let rewards = assemble_alignment(&tape, &val_grads)?.rewards;
            let mut score_sum = vec![0.0; k];
            for a in 0..k {
                let w = c[a] as f64 * rewards[a];
                for (s, g) in score_sum.iter_mut().zip(&scores[a]) {
                    *s += w * g;
                }
            }
            Ok((val_loss, score_sum))
        });

        let log_p: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let mut expected = vec![0.0; k];
        let mut losses = Vec::with_capacity(comps.len());
        for (c, outcome) in comps.iter().zip(outcomes) {
            let (loss, score_sum) = outcome?;
            let w = log_multinomial(c, &log_p, &log_fact).exp();
            for (e, s) in expected.iter_mut().zip(&score_sum) {
                *e += w * s;
            }
            losses.push(loss);
        }
        let gar_update: Vec<f64> = expected
            .iter()
            .map(|e| -problem.step_size / n as f64 * e)
            .collect();

        let mut meta_gradient = vec![0.0; k];
        for (j, mg) in meta_gradient.iter_mut().enumerate() {
            let lp_plus = perturbed_log_probs(&problem.policy, j, problem.fd_step)?;
            let lp_minus = perturbed_log_probs(&problem.policy, j, -problem.fd_step)?;
            let mut diff = 0.0;
            for (c, loss) in comps.iter().zip(&losses) {
                let a = log_multinomial(c, &lp_plus, &log_fact);
                let b = log_multinomial(c, &lp_minus, &log_fact);
                diff += b.exp() * (a - b).exp_m1() * loss;
            }
            *mg = diff / (2.0 * problem.fd_step);
        }

        let (cosine, rel_error) = compare(&gar_update, &meta_gradient);
        points.push(VerifyPoint {
            batch_size: n,
            compositions: comps.len(),
            gar_update,
            meta_gradient,
            cosine,
            rel_error,
        });
    }

    let infinite_batch_gradient = infinite_batch_gradient(problem, &action_grads)?;
    let errors: Vec<f64> = points.iter().filter_map(|p| p.rel_error).collect();
    let (inversions, monotone) = trend(&errors);
    Ok(VerifyReport {
        actions: k,
        param_count,
        step_size: problem.step_size,
        points,
        infinite_batch_gradient,
        inversions,
        monotone,
    })
}

/// Number of compositions of `n` into `k` non-negative parts.
fn composition_count(n: usize, k: usize) -> u128 {
    // C(n + k − 1, k − 1), exact in integers
    let mut c: u128 = 1;
    for i in 1..k as u128 {
        c = c * (n as u128 + i) / i;
        if c > u64::MAX as u128 {
            return c;
        }
    }
    c
}

fn compositions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 0..=left {
            cur.push(first);
            rec(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

/// `log( n! / Π c_a! · Π p_a^{c_a} )`.
fn log_multinomial(c: &[usize], log_p: &[f64], log_fact: &[f64]) -> f64 {
    let n: usize = c.iter().sum();
    let mut lp = log_fact[n];
    for (&ca, &lpa) in c.iter().zip(log_p) {
        lp -= log_fact[ca];
        if ca > 0 {
            lp += ca as f64 * lpa;
        }
    }
    lp
}

fn perturbed_log_probs(policy: &SplitPolicy, j: usize, h: f64) -> Result<Vec<f64>> {
    let mut logits = policy.params().to_vec();
    logits[j] += h;
    Ok(SplitPolicy::from_logits(logits)?
        .probs()
        .iter()
        .map(|p| p.ln())
        .collect())
}

/// `θ_t − α Σ_a w_a ∇ℓ_a`.
fn inner_step(
    net: &Network,
    action_grads: &[Gradients],
    weights: &[f64],
    alpha: f64,
) -> Result<Network> {
    let mut step = Gradients::zeros_like(net);
    for (g, &w) in action_grads.iter().zip(weights) {
        if w != 0.0 {
            step.add_scaled(g, w)?;
        }
    }
    let mut next = net.clone();
    for (p, s) in next.params_mut().into_iter().zip(&step.tensors) {
        p.add_scaled(s, -alpha)?;
    }
    Ok(next)
}

fn infinite_batch_gradient(
    problem: &VerifyProblem,
    action_grads: &[Gradients],
) -> Result<Vec<f64>> {
    let objective = |logits: Vec<f64>| -> Result<f64> {
        let probs = SplitPolicy::from_logits(logits)?.probs();
        let next = inner_step(&problem.net, action_grads, &probs, problem.step_size)?;
        nn::loss(&next, &problem.validation, &problem.validation_labels)
    };
    let base = problem.policy.params().to_vec();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            plus[j] += problem.fd_step;
            let mut minus = base.clone();
            minus[j] -= problem.fd_step;
            Ok((objective(plus)? - objective(minus)?) / (2.0 * problem.fd_step))
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn compare(estimate: &[f64], target: &[f64]) -> (Option<f64>, Option<f64>) {
    let (ne, nt) = (norm(estimate), norm(target));
    let cosine = (ne > ZERO_NORM && nt > ZERO_NORM)
        .then(|| estimate.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / (ne * nt));
    let diff: Vec<f64> = estimate.iter().zip(target).map(|(a, b)| a - b).collect();
    let rel_error = (nt > ZERO_NORM).then(|| norm(&diff) / nt);
    (cosine, rel_error)
}

/// Counts increases along `errors`; the trend holds with at most one
/// increase of at most 5%.
fn trend(errors: &[f64]) -> (usize, bool) {
    let increases: Vec<f64> = errors
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] / w[0])
        .collect();
    let ok = match increases.as_slice() {
        [] => true,
        [ratio] => *ratio <= 1.05,
        _ => false,
    };
    (increases.len(), ok)
}
