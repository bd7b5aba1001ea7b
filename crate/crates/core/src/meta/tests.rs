use super::*;
use crate::augment::Registry;
use crate::data::{make_noisy_splits, synth_blobs, synth_images};
use crate::galign::naive_alignment_oracle;
use crate::meta::verify::{verify_unbiasedness, VerifyProblem};
use crate::nn::{Layer, LayerSpec};
use crate::policies::{split_log_prob_grad, OlaPolicy, SplitPolicy};
use crate::rng::Rng;

fn specs(s: &[&str]) -> Vec<LayerSpec> {
    s.iter().map(|x| x.parse().unwrap()).collect()
}

fn split_setup(seed: u64) -> (Network, SplitTask, SplitPolicy) {
    let ds = synth_blobs(4, 60, 6, seed).unwrap();
    let sds = make_noisy_splits(&ds, 4, 0, &mut Rng::new(seed + 1)).unwrap();
    let net = Network::from_specs(
        &[6],
        &specs(&["linear:8", "bias", "relu", "linear:4", "bias"]),
        &mut Rng::new(seed + 2),
    )
    .unwrap();
    let task = SplitTask::new(sds, 16, Rng::new(seed + 3)).unwrap();
    (net, task, SplitPolicy::new(4).unwrap())
}

#[test]
fn mode_parsing() {
    for m in ["gar", "nslr", "fixed"] {
        assert_eq!(m.parse::<RewardMode>().unwrap().to_string(), m);
    }
    assert!("GAR".parse::<RewardMode>().is_err());
}

#[test]
fn normalization_cases() {
    let out = normalize_rewards(&[1.0, 2.0, 3.0]);
    let std = (2.0f64 / 3.0).sqrt();
    let expected = [-1.0 / (std + 1e-8), 0.0, 1.0 / (std + 1e-8)];
    for (a, e) in out.iter().zip(expected) {
        assert!((a - e).abs() < 1e-15);
    }
    assert!((out[2] - 1.2247).abs() < 1e-4);
    assert_eq!(normalize_rewards(&[4.2; 5]), vec![0.0; 5]);
    assert_eq!(normalize_rewards(&[7.0]), vec![0.0]);

    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let scale = 0.01 + 10.0 * rng.uniform();
        let raw: Vec<f64> = (0..50).map(|_| scale * rng.normal() + 3.0).collect();
        let (_, sigma) = mean_std(&raw);
        let (m, s) = mean_std(&normalize_rewards(&raw));
        assert!(m.abs() < 1e-12);
        // the ε in the denominator shrinks the std by σ/(σ + ε)
        assert!((s - sigma / (sigma + 1e-8)).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn nslr_and_reinforce_definitions() {
    assert_eq!(nslr_reward(2.3).unwrap(), -2.3);
    assert!(nslr_reward(f64::NAN).is_err());
    let policy = SplitPolicy::from_logits(vec![0.1, -0.4, 0.7]).unwrap();
    let scores: Vec<Vec<f64>> = [0, 2, 2, 1]
        .iter()
        .map(|&a| split_log_prob_grad(&policy, a).unwrap())
        .collect();
    let loss = 1.7;
    let r = nslr_reward(loss).unwrap();
    let est = reinforce_gradient(&[r; 4], &scores).unwrap();
    for (j, e) in est.iter().enumerate() {
        let direct = -loss * scores.iter().map(|s| s[j]).sum::<f64>();
        assert!((e - direct).abs() < 1e-14);
    }
    assert!(reinforce_gradient(&[1.0], &scores).is_err());
}

#[test]
fn accumulator_unit_cases() {
    let score = vec![0.25, -0.5, 0.125];
    let batch = |normalized: Vec<f64>| RewardBatch {
        step: 0,
        raw: RawReward::PerExample(normalized.clone()),
        normalized,
    };
    let mut acc = MetaAccumulator::new(3, 2, AdamConfig::default()).unwrap();
    acc.accumulate(&batch(vec![0.0, 0.0]), &[score.clone(), score.clone()])
        .unwrap();
    assert_eq!(acc.gradient(), &[0.0; 3]);

    let mut acc = MetaAccumulator::new(3, 2, AdamConfig::default()).unwrap();
    acc.accumulate(&batch(vec![1.0]), std::slice::from_ref(&score))
        .unwrap();
    assert_eq!(acc.gradient(), &[-0.25, 0.5, -0.125]);
    assert!(matches!(
        acc.accumulate(&batch(vec![1.0, 2.0]), std::slice::from_ref(&score)),
        Err(Error::Reward(_))
    ));

    let mut params = vec![0.0; 3];
    assert!(!acc.flush_if_due(&mut params).unwrap());
    acc.accumulate(&batch(vec![0.0]), std::slice::from_ref(&score))
        .unwrap();
    assert!(acc.flush_if_due(&mut params).unwrap());
    // first Adam step moves each coordinate by the learning rate against the gradient sign
    for (p, g) in params.iter().zip([-0.25, 0.5, -0.125]) {
        assert!((p + 0.1 * f64::signum(g)).abs() < 1e-6);
    }
    assert_eq!(acc.gradient(), &[0.0; 3]);
    assert_eq!(acc.steps_accumulated(), 0);
}

#[test]
fn nslr_constant_losses_give_no_update() {
    let mut acc = MetaAccumulator::new(2, 10, AdamConfig::default()).unwrap();
    let mut params = vec![0.3, -0.3];
    for _ in 0..10 {
        acc.accumulate_scalar(-2.0, vec![0.4, -0.1]).unwrap();
    }
    assert!(!acc.flush_if_due(&mut params).unwrap());
    assert_eq!(params, vec![0.3, -0.3]);

    for i in 0..10 {
        acc.accumulate_scalar(-2.0 - i as f64, vec![0.4 * i as f64, -0.1])
            .unwrap();
    }
    assert!(acc.flush_if_due(&mut params).unwrap());
    assert_ne!(params, vec![0.3, -0.3]);
}

#[test]
fn gar_rewards_properties() {
    let mut rng = Rng::new(5);
    let net = Network::from_specs(
        &[2, 5, 5],
        &specs(&["conv:2:3", "bias", "relu", "flatten", "linear:3", "bias"]),
        &mut rng,
    )
    .unwrap();
    let x = Tensor::new([6, 2, 5, 5], (0..300).map(|_| rng.normal()).collect()).unwrap();
    let labels: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();
    let b = nn::loss_and_backward(&net, &x, &labels).unwrap();
    let pending = PendingStep {
        step: 3,
        tape: Some(b.tape),
        actions: vec![ActionRecord::Split { index: 0 }; 6],
        log_prob_grads: vec![vec![0.0]; 6],
    };
    let x2 = Tensor::new([4, 2, 5, 5], (0..200).map(|_| rng.normal()).collect()).unwrap();
    let (_, reference) = nn::loss_and_grads(&net, &x2, &[0, 1, 2, 0]).unwrap();

    let rb = gar_rewards(&pending, &reference).unwrap();
    assert_eq!(rb.step, 3);
    let RawReward::PerExample(raw) = &rb.raw else {
        panic!("per-example rewards expected")
    };
    let naive = naive_alignment_oracle(&net, &x, &labels, &reference).unwrap();
    for (r, o) in raw.iter().zip(&naive) {
        assert!((r - o).abs() <= 1e-9 * (1.0 + o.abs()));
    }

    let scaled = gar_rewards(&pending, &reference.scale(-2.5)).unwrap();
    let RawReward::PerExample(sraw) = &scaled.raw else {
        panic!()
    };
    for (s, r) in sraw.iter().zip(raw) {
        assert!((s + 2.5 * r).abs() <= 1e-12 * (1.0 + r.abs()));
    }

    let zero = gar_rewards(&pending, &Gradients::zeros_like(&net)).unwrap();
    assert_eq!(zero.normalized, vec![0.0; 6]);

    let other = Network::from_specs(
        &[2, 5, 5],
        &specs(&["conv:3:3", "bias", "relu", "flatten", "linear:3", "bias"]),
        &mut rng,
    )
    .unwrap();
    assert!(matches!(
        gar_rewards(&pending, &Gradients::zeros_like(&other)),
        Err(Error::Architecture(_))
    ));
}

#[test]
fn orthogonal_reference_gives_zero_rewards() {
    // one linear layer, inputs only on coordinate 0, reference only on row 1
    let net = Network::new(
        vec![2],
        vec![Layer::Linear {
            weight: Tensor::new([2, 2], vec![0.3, -0.1, 0.2, 0.4]).unwrap(),
        }],
    )
    .unwrap();
    let x = Tensor::new([3, 2], vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap();
    let b = nn::loss_and_backward(&net, &x, &[0, 1, 1]).unwrap();
    let pending = PendingStep {
        step: 0,
        tape: Some(b.tape),
        actions: vec![ActionRecord::Split { index: 0 }; 3],
        log_prob_grads: vec![vec![0.0]; 3],
    };
    let reference = Gradients {
        tensors: vec![Tensor::new([2, 2], vec![0.0, 0.0, 1.3, -0.7]).unwrap()],
    };
    let RawReward::PerExample(raw) = gar_rewards(&pending, &reference).unwrap().raw else {
        panic!()
    };
    assert!(raw.iter().all(|r| r.abs() < 1e-10));
}

/// Replays fixed batches and labels every example with split 0.
struct FixedBatches(Vec<(Tensor, Vec<usize>)>);

impl MetaTask<SplitPolicy> for FixedBatches {
    fn batch(&mut self, step: u64, _policy: &SplitPolicy) -> Result<StepBatch> {
        let (x, y) = self.0[step as usize].clone();
        let n = y.len();
        Ok(StepBatch {
            inputs: x,
            labels: y,
            actions: Some(vec![ActionRecord::Split { index: 0 }; n]),
        })
    }
}

#[test]
fn three_step_hand_unrolled_rewards() {
    // logits = x · (w0, w1); ∇_w ℓ = x · (softmax − e_y)
    let w0 = [0.4, -0.3];
    let net = Network::new(
        vec![1],
        vec![Layer::Linear {
            weight: Tensor::new([1, 2], w0.to_vec()).unwrap(),
        }],
    )
    .unwrap();
    let batches = vec![
        (vec![1.0, -0.5], vec![0, 1]),
        (vec![2.0, 0.3, -1.0], vec![1, 1, 0]),
        (vec![-0.7, 1.5], vec![0, 0]),
    ];
    let grad = |w: [f64; 2], x: f64, y: usize| -> [f64; 2] {
        let (a, b) = (x * w[0], x * w[1]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = [ea / (ea + eb), eb / (ea + eb)];
        [
            x * (s[0] - f64::from(y == 0)),
            x * (s[1] - f64::from(y == 1)),
        ]
    };
    let mean_grad = |w: [f64; 2], xs: &[f64], ys: &[usize]| -> [f64; 2] {
        let mut g = [0.0; 2];
        for (&x, &y) in xs.iter().zip(ys) {
            let gi = grad(w, x, y);
            g[0] += gi[0] / xs.len() as f64;
            g[1] += gi[1] / xs.len() as f64;
        }
        g
    };
    let alpha = 0.1;
    let mut thetas = vec![w0];
    for (xs, ys) in &batches {
        let cur = *thetas.last().unwrap();
        let g = mean_grad(cur, xs, ys);
        thetas.push([cur[0] - alpha * g[0], cur[1] - alpha * g[1]]);
    }
    let expected: Vec<Vec<f64>> = (0..2)
        .map(|t| {
            let (xs, ys) = &batches[t];
            let (nx, ny) = &batches[t + 1];
            let reference = mean_grad(thetas[t + 1], nx, ny);
            xs.iter()
                .zip(ys)
                .map(|(&x, &y)| {
                    let g = grad(thetas[t], x, y);
                    g[0] * reference[0] + g[1] * reference[1]
                })
                .collect()
        })
        .collect();

    let mut task = FixedBatches(
        batches
            .iter()
            .map(|(xs, ys)| (Tensor::new([xs.len(), 1], xs.clone()).unwrap(), ys.clone()))
            .collect(),
    );
    let cfg = TrainConfig {
        mode: RewardMode::Gar,
        sgd: SgdConfig {
            learning_rate: alpha,
            momentum: 0.0,
            l2: 0.0,
        },
        adam: AdamConfig::default(),
        window: 10,
    };
    let mut trainer = MetaTrainer::new(net, SplitPolicy::new(2).unwrap(), cfg).unwrap();
    assert!(trainer.step(&mut task).unwrap().rewards.is_none());
    for exp in &expected {
        let out = trainer.step(&mut task).unwrap();
        let RawReward::PerExample(raw) = out.rewards.unwrap().raw else {
            panic!()
        };
        assert_eq!(raw.len(), exp.len());
        for (r, e) in raw.iter().zip(exp) {
            assert!((r - e).abs() < 1e-14, "{r} vs {e}");
        }
    }
    let final_w = trainer.net().params()[0].data().to_vec();
    assert!((final_w[0] - thetas[3][0]).abs() < 1e-15 && (final_w[1] - thetas[3][1]).abs() < 1e-15);
}

#[test]
fn fixed_mode_is_plain_sgd() {
    let (net, mut task, policy) = split_setup(10);
    let cfg = TrainConfig {
        mode: RewardMode::Fixed,
        ..TrainConfig::default()
    };
    let out = train_loop(net.clone(), &mut task, policy.clone(), cfg, 30).unwrap();

    let (_, task2, _) = split_setup(10);
    let sds = task2.data().clone();
    let mut rng = Rng::new(13);
    let mut plain = net;
    let mut state = SgdState::default();
    for _ in 0..30 {
        let b = crate::data::sample_batch(&sds, &policy.probs(), 16, &mut rng).unwrap();
        let (_, g) = nn::loss_and_grads(&plain, &b.inputs, &b.labels).unwrap();
        sgd_step(&mut plain, &g, &SgdConfig::default(), &mut state).unwrap();
    }
    assert_eq!(out.net, plain);
    assert_eq!(out.policy, policy);
    assert_eq!(out.trace.meta_updates(), 0);
}

#[test]
fn gar_and_nslr_update_the_policy_once_per_window() {
    for mode in [RewardMode::Gar, RewardMode::Nslr] {
        let (net, mut task, policy) = split_setup(20);
        let cfg = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        let out = train_loop(net, &mut task, policy.clone(), cfg, 41).unwrap();
        let applied: Vec<u64> = out
            .trace
            .rows
            .iter()
            .filter(|r| r.meta_update_applied)
            .map(|r| r.step)
            .collect();
        assert_eq!(applied, vec![10, 20, 30, 40], "{mode}");
        assert_ne!(out.policy, policy);
        assert!(out.trace.rows[0].reward_mean.is_none());
        assert!(out.trace.rows[1..].iter().all(|r| r.reward_mean.is_some()));
    }
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let (net, mut task, policy) = split_setup(30);
        let out = train_loop(net, &mut task, policy, TrainConfig::default(), 25).unwrap();
        (out.net, out.policy, out.trace)
    };
    assert_eq!(run(), run());
}

/// A single-action policy: nothing to learn.
#[derive(Clone, Debug, PartialEq)]
struct OneAction(Vec<f64>);

impl Policy for OneAction {
    fn params(&self) -> &[f64] {
        &self.0
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    fn log_prob_grad(&self, _action: &ActionRecord) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn probability_columns(&self) -> Vec<(String, f64)> {
        vec![("p_only".into(), 1.0)]
    }
}

struct BlobTask(crate::data::Dataset, Rng);

impl MetaTask<OneAction> for BlobTask {
    fn batch(&mut self, _step: u64, _policy: &OneAction) -> Result<StepBatch> {
        let idx: Vec<usize> = (0..12).map(|_| self.1.below(self.0.len())).collect();
        Ok(StepBatch {
            inputs: self.0.images().select_rows(&idx),
            labels: idx.iter().map(|&i| self.0.labels()[i]).collect(),
            actions: Some(vec![ActionRecord::Split { index: 0 }; 12]),
        })
    }
}

#[test]
fn degenerate_policy_matches_fixed_mode() {
    let ds = synth_blobs(3, 40, 5, 2).unwrap();
    let net = Network::from_specs(
        &[5],
        &specs(&["linear:6", "bias", "relu", "linear:3"]),
        &mut Rng::new(3),
    )
    .unwrap();
    let run = |mode| {
        let mut task = BlobTask(ds.clone(), Rng::new(4));
        let cfg = TrainConfig {
            mode,
            window: 2,
            ..TrainConfig::default()
        };
        train_loop(net.clone(), &mut task, OneAction(vec![0.0]), cfg, 12).unwrap()
    };
    let gar = run(RewardMode::Gar);
    let fixed = run(RewardMode::Fixed);
    assert_eq!(gar.net, fixed.net);
    assert_eq!(gar.policy, OneAction(vec![0.0]));
}

fn ola_setup(seed: u64) -> (Network, AugmentTask, OlaPolicy) {
    let ds = synth_images(3, 20, 1, 6, 0.05, seed).unwrap();
    let reg = Registry::from_names(&[
        "identity",
        "flip_lr",
        "translate_x",
        "gaussian_noise_canary",
    ])
    .unwrap();
    let net = Network::from_specs(
        &[1, 6, 6],
        &specs(&["conv:2:3", "bias", "relu", "flatten", "linear:3", "bias"]),
        &mut Rng::new(seed + 1),
    )
    .unwrap();
    let task = AugmentTask::new(ds, reg, 8, AugmentArm::Learned, seed + 2).unwrap();
    (net, task, OlaPolicy::new(4).unwrap())
}

#[test]
fn interleaved_steps_alternate_and_only_augmented_steps_are_pending() {
    let (net, mut task, policy) = ola_setup(40);
    let cfg = TrainConfig {
        window: 1,
        ..TrainConfig::default()
    };
    let mut trainer = MetaTrainer::new(net, policy, cfg).unwrap();
    for t in 0..6 {
        let out = trainer.step(&mut task).unwrap();
        if t % 2 == 0 {
            assert!(trainer.pending().is_none());
            assert_eq!(out.rewards.is_some(), t > 0);
            assert_eq!(out.row.meta_update_applied, t > 0);
        } else {
            assert_eq!(trainer.pending().unwrap().step, t);
            assert!(out.rewards.is_none());
        }
    }
}

#[test]
fn reward_ignores_policy_changes_after_sampling() {
    let run = |perturb: bool| {
        let (net, mut task, policy) = ola_setup(50);
        let cfg = TrainConfig {
            window: 1,
            ..TrainConfig::default()
        };
        let mut trainer = MetaTrainer::new(net, policy, cfg).unwrap();
        trainer.step(&mut task).unwrap();
        trainer.step(&mut task).unwrap();
        if perturb {
            for p in trainer.policy_mut().params_mut() {
                *p += 0.7;
            }
        }
        trainer.step(&mut task).unwrap().rewards.unwrap()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn uniform_arm_leaves_policy_untouched() {
    let (net, _, policy) = ola_setup(60);
    let ds = synth_images(3, 20, 1, 6, 0.05, 60).unwrap();
    let reg = Registry::from_names(&[
        "identity",
        "flip_lr",
        "translate_x",
        "gaussian_noise_canary",
    ])
    .unwrap();
    let mut ua =
        AugmentTask::new(ds, reg, 8, AugmentArm::Uniform { strength_cap: 30 }, 61).unwrap();
    let cfg = TrainConfig {
        mode: RewardMode::Fixed,
        window: 1,
        ..TrainConfig::default()
    };
    let out = train_loop(net, &mut ua, policy.clone(), cfg, 10).unwrap();
    assert_eq!(out.policy, policy);
}

#[test]
fn unbiasedness_on_tiny_problem() {
    let report = verify_unbiasedness(&VerifyProblem::tiny(7).unwrap()).unwrap();
    assert_eq!(report.param_count, 26);
    assert!(report.final_cosine().unwrap() >= 0.99, "{report:?}");
    assert!(report.monotone, "{report:?}");

    let none = verify_unbiasedness(&VerifyProblem::no_effect(7).unwrap()).unwrap();
    for p in &none.points {
        assert!(
            p.gar_update
                .iter()
                .chain(&p.meta_gradient)
                .all(|v| v.abs() < 1e-8),
            "{p:?}"
        );
    }
}
