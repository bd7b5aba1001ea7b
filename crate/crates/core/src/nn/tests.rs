use super::*;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.normal()).collect()).unwrap()
}

fn fc_net(rng: &mut Rng) -> Network {
    let specs: Vec<LayerSpec> = ["linear:5", "bias", "relu", "linear:3", "bias"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut net = Network::from_specs(&[4], &specs, rng).unwrap();
    randomize_biases(&mut net, rng);
    net
}

fn conv_net(rng: &mut Rng) -> Network {
    let specs: Vec<LayerSpec> = ["conv:2:3", "bias", "relu", "flatten", "linear:3", "bias"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut net = Network::from_specs(&[2, 4, 5], &specs, rng).unwrap();
    randomize_biases(&mut net, rng);
    net
}

fn randomize_biases(net: &mut Network, rng: &mut Rng) {
    for layer in &mut net.layers {
        if let Layer::Bias { bias } = layer {
            for v in bias.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
}

fn batch_for(net: &Network, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    let x = random_tensor(&shape, rng);
    let labels = (0..n).map(|_| rng.below(net.classes())).collect();
    (x, labels)
}

/// Central finite differences of the mean loss, one coordinate at a time.
fn fd_grads(net: &Network, x: &Tensor, labels: &[usize], h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let count = net.params().len();
    for p in 0..count {
        let len = net.params()[p].len();
        for j in 0..len {
            let mut plus = net.clone();
            plus.params_mut()[p].data_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut()[p].data_mut()[j] -= h;
            let lp = loss(&plus, x, labels).unwrap();
            let lm = loss(&minus, x, labels).unwrap();
            out.push((lp - lm) / (2.0 * h));
        }
    }
    out
}

fn assert_rel_close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (x, y) in a.iter().zip(b) {
        assert!(
            (x - y).abs() <= rel * scale.max(y.abs()),
            "{x} vs {y} (scale {scale})"
        );
    }
}

#[test]
fn layer_spec_round_trip() {
    for s in ["linear:200", "bias", "conv:4:3", "relu", "flatten"] {
        assert_eq!(s.parse::<LayerSpec>().unwrap().to_string(), s);
    }
    assert!("linear:0".parse::<LayerSpec>().is_err());
    assert!("pool:2".parse::<LayerSpec>().is_err());
}

#[test]
fn zero_weight_network_gives_zero_logits() {
    let mut rng = Rng::new(1);
    let mut net = fc_net(&mut rng);
    for p in net.params_mut() {
        p.data_mut().fill(0.0);
    }
    let (x, _) = batch_for(&net, 6, &mut rng);
    assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_linear_is_matmul() {
    let mut rng = Rng::new(2);
    let w = random_tensor(&[4, 3], &mut rng);
    let net = Network::new(vec![4], vec![Layer::Linear { weight: w.clone() }]).unwrap();
    let x = random_tensor(&[5, 4], &mut rng);
    assert_eq!(net.forward(&x).unwrap(), x.matmul(&w).unwrap());
}

#[test]
fn forward_matches_manual_composition() {
    let mut rng = Rng::new(3);
    let net = fc_net(&mut rng);
    let (x, _) = batch_for(&net, 7, &mut rng);
    let p = net.params();
    let h = x.matmul(p[0]).unwrap();
    let mut out = Vec::new();
    for i in 0..7 {
        let hidden: Vec<f64> = h
            .row(i)
            .iter()
            .zip(p[1].data())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        for k in 0..3 {
            let mut acc = p[3].data()[k];
            for (j, hj) in hidden.iter().enumerate() {
                acc += hj * p[2].data()[j * 3 + k];
            }
            out.push(acc);
        }
    }
    let logits = net.forward(&x).unwrap();
    for (a, b) in logits.data().iter().zip(&out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn architecture_validation() {
    let w = Tensor::zeros([4, 3]);
    assert!(Network::new(vec![5], vec![Layer::Linear { weight: w.clone() }]).is_err());
    assert!(Network::new(
        vec![1, 3, 3],
        vec![Layer::Conv {
            kernel: Tensor::zeros([1, 1, 2, 2])
        }]
    )
    .is_err());
    let net = Network::new(vec![4], vec![Layer::Linear { weight: w }]).unwrap();
    assert!(net.forward(&Tensor::zeros([2, 5])).is_err());
}

#[test]
fn uniform_logits_give_log_classes() {
    let net = Network::new(
        vec![2],
        vec![Layer::Linear {
            weight: Tensor::zeros([2, 7]),
        }],
    )
    .unwrap();
    let b = loss_and_backward(&net, &Tensor::full([3, 2], 0.5), &[0, 3, 6]).unwrap();
    assert!((b.loss - 7f64.ln()).abs() < 1e-14);
}

#[test]
fn label_out_of_range_is_rejected() {
    let mut rng = Rng::new(4);
    let net = fc_net(&mut rng);
    let (x, _) = batch_for(&net, 2, &mut rng);
    assert!(matches!(
        loss_and_backward(&net, &x, &[0, 3]),
        Err(Error::Label {
            label: 3,
            classes: 3
        })
    ));
}

#[test]
fn fc_gradients_match_finite_differences() {
    let mut rng = Rng::new(5);
    let net = fc_net(&mut rng);
    let (x, labels) = batch_for(&net, 6, &mut rng);
    let b = loss_and_backward(&net, &x, &labels).unwrap();
    assert_rel_close(&b.grads.flatten(), &fd_grads(&net, &x, &labels, 1e-5), 1e-6);
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Rng::new(6);
    let net = conv_net(&mut rng);
    let (x, labels) = batch_for(&net, 3, &mut rng);
    let b = loss_and_backward(&net, &x, &labels).unwrap();
    assert_rel_close(&b.grads.flatten(), &fd_grads(&net, &x, &labels, 1e-5), 1e-6);
}

#[test]
fn stacked_conv_input_gradients_are_correct() {
    // second conv exercises the input-gradient (adjoint) path
    let mut rng = Rng::new(7);
    let specs: Vec<LayerSpec> = [
        "conv:2:3", "relu", "conv:2:5", "bias", "flatten", "linear:2",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect();
    let net = Network::from_specs(&[1, 5, 6], &specs, &mut rng).unwrap();
    let (x, labels) = batch_for(&net, 2, &mut rng);
    let b = loss_and_backward(&net, &x, &labels).unwrap();
    assert_rel_close(&b.grads.flatten(), &fd_grads(&net, &x, &labels, 1e-5), 1e-6);
}

#[test]
fn duplicated_example_matches_single() {
    let mut rng = Rng::new(8);
    let net = fc_net(&mut rng);
    let (x, labels) = batch_for(&net, 1, &mut rng);
    let dup = x.select_rows(&[0, 0, 0, 0]);
    let single = loss_and_backward(&net, &x, &labels).unwrap();
    let many = loss_and_backward(&net, &dup, &[labels[0]; 4]).unwrap();
    assert!((single.loss - many.loss).abs() < 1e-14);
    assert_rel_close(&many.grads.flatten(), &single.grads.flatten(), 1e-12);
}

#[test]
fn per_example_grads_match_singletons_and_mean() {
    let mut rng = Rng::new(9);
    for net in [fc_net(&mut rng), conv_net(&mut rng)] {
        let (x, labels) = batch_for(&net, 5, &mut rng);
        let per = per_example_grads(&net, &x, &labels).unwrap();
        let batch = loss_and_backward(&net, &x, &labels).unwrap();
        let mut mean = Gradients::zeros_like(&net);
        for (i, g) in per.iter().enumerate() {
            let single = loss_and_grads(&net, &x.select_rows(&[i]), &labels[i..=i])
                .unwrap()
                .1;
            assert_eq!(g, &single);
            mean.add_scaled(g, 1.0 / 5.0).unwrap();
        }
        assert_rel_close(&mean.flatten(), &batch.grads.flatten(), 1e-12);

        let one = per_example_grads(&net, &x.select_rows(&[0]), &labels[..1]).unwrap();
        assert_eq!(
            one[0],
            loss_and_grads(&net, &x.select_rows(&[0]), &labels[..1])
                .unwrap()
                .1
        );
    }
}

#[test]
fn tape_reconstructs_per_example_gradients() {
    let mut rng = Rng::new(10);
    for net in [fc_net(&mut rng), conv_net(&mut rng)] {
        let (x, labels) = batch_for(&net, 4, &mut rng);
        let b = loss_and_backward(&net, &x, &labels).unwrap();
        assert_eq!(b.tape.entries.len(), net.param_layers().len());
        for e in &b.tape.entries {
            assert_eq!(e.input.rows(), e.incoming.rows());
        }
        let per = per_example_grads(&net, &x, &labels).unwrap();
        for (i, g) in per.iter().enumerate() {
            let rebuilt = b.tape.per_example_gradient(i, &net).unwrap();
            for (a, c) in rebuilt.flatten().iter().zip(g.flatten()) {
                assert!((a - c).abs() <= 1e-9 * (1.0 + c.abs()));
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(11);
        let mut net = fc_net(&mut rng);
        let (x, labels) = batch_for(&net, 8, &mut rng);
        let mut state = SgdState::default();
        for _ in 0..5 {
            let (_, g) = loss_and_grads(&net, &x, &labels).unwrap();
            sgd_step(&mut net, &g, &SgdConfig::default(), &mut state).unwrap();
        }
        net
    };
    assert_eq!(run(), run());
}
