//! Minimal feed-forward networks with hand-written reverse-mode gradients.
//!
//! Activations are batch-first. A backward pass can capture a [`LayerTape`]
//! holding, for every parameterized layer, its input and the per-example
//! gradient of the loss with respect to its output.

mod optim;

pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdConfig, SgdState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// One network layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `x' = x · weight`, weight is `d_in × d_out`.
    Linear {
        weight: Tensor,
    },
    /// `x'_i = x_i + bias`, bias has the full per-example feature shape.
    Bias {
        bias: Tensor,
    },
    /// Multi-channel zero-padded stride-1 convolution, kernel is
    /// `out × in × c1 × c2`.
    Conv {
        kernel: Tensor,
    },
    Relu,
    Flatten,
}

/// Kind of a parameterized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Bias,
    Linear,
    Conv,
}

impl Layer {
    pub fn param(&self) -> Option<&Tensor> {
        match self {
            Layer::Linear { weight } => Some(weight),
            Layer::Bias { bias } => Some(bias),
            Layer::Conv { kernel } => Some(kernel),
            Layer::Relu | Layer::Flatten => None,
        }
    }

    fn param_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Linear { weight } => Some(weight),
            Layer::Bias { bias } => Some(bias),
            Layer::Conv { kernel } => Some(kernel),
            Layer::Relu | Layer::Flatten => None,
        }
    }

    pub fn kind(&self) -> Option<ParamKind> {
        match self {
            Layer::Linear { .. } => Some(ParamKind::Linear),
            Layer::Bias { .. } => Some(ParamKind::Bias),
            Layer::Conv { .. } => Some(ParamKind::Conv),
            Layer::Relu | Layer::Flatten => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Bias { .. } => "bias",
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear { weight } => match input {
                [d] if *d == weight.shape()[0] => Ok(vec![weight.shape()[1]]),
                _ => Err(dim_err("linear", input, weight.shape())),
            },
            Layer::Bias { bias } => {
                if input == bias.shape() {
                    Ok(input.to_vec())
                } else {
                    Err(dim_err("bias", input, bias.shape()))
                }
            }
            Layer::Conv { kernel } => {
                let ks = kernel.shape();
                match input {
                    [c, h, w] if ks.len() == 4 && *c == ks[1] => {
                        tensor::check_odd_kernel(ks[2], ks[3])?;
                        Ok(vec![ks[0], *h, *w])
                    }
                    _ => Err(dim_err("conv", input, ks)),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Textual layer description used by experiment configs:
/// `linear:<out>`, `bias`, `conv:<out_channels>:<kernel>`, `relu`, `flatten`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear(usize),
    Bias,
    Conv { out_channels: usize, kernel: usize },
    Relu,
    Flatten,
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::Config(format!("bad layer size in `{s}`")))
        };
        match parts[..] {
            ["linear", out] => Ok(LayerSpec::Linear(num(out)?)),
            ["bias"] => Ok(LayerSpec::Bias),
            ["conv", out, k] => Ok(LayerSpec::Conv {
                out_channels: num(out)?,
                kernel: num(k)?,
            }),
            ["relu"] => Ok(LayerSpec::Relu),
            ["flatten"] => Ok(LayerSpec::Flatten),
            _ => Err(Error::Config(format!("unknown layer spec `{s}`"))),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear(out) => write!(f, "linear:{out}"),
            LayerSpec::Bias => write!(f, "bias"),
            LayerSpec::Conv {
                out_channels,
                kernel,
            } => write!(f, "conv:{out_channels}:{kernel}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

/// Ordered stack of layers with a fixed per-example input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Validates that consecutive layer shapes compose and that the output is
    /// a flat logit vector.
    pub fn new(input_shape: impl Into<Vec<usize>>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape: input_shape.into(),
            layers,
        };
        let out = net.output_shape()?;
        if out.len() != 1 {
            return Err(Error::Architecture(format!(
                "network output must be a logit vector, got shape {out:?}"
            )));
        }
        Ok(net)
    }

    /// Builds a network from layer specs with scaled-normal initialization
    /// (std `1/sqrt(fan_in)`) and zero biases.
    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Linear(out) => {
                    let [d] = shape[..] else {
                        return Err(dim_err("linear", &shape, &[out]));
                    };
                    Layer::Linear {
                        weight: init_normal(vec![d, out], d, rng),
                    }
                }
                LayerSpec::Bias => Layer::Bias {
                    bias: Tensor::zeros(shape.clone()),
                },
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    let [c, _, _] = shape[..] else {
                        return Err(dim_err("conv", &shape, &[out_channels, kernel]));
                    };
                    Layer::Conv {
                        kernel: init_normal(
                            vec![out_channels, c, kernel, kernel],
                            c * kernel * kernel,
                            rng,
                        ),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Self::new(input_shape.to_vec(), layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn classes(&self) -> usize {
        self.output_shape().map(|s| s[0]).unwrap_or(0)
    }

    /// Parameter tensors in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(Layer::param).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::param_mut)
            .collect()
    }

    /// `(layer index, kind)` of every parameterized layer.
    pub fn param_layers(&self) -> Vec<(usize, ParamKind)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.kind().map(|k| (i, k)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.ndim() == 0 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(dim_err("forward", batch.shape(), &expected));
        }
        Ok(batch.rows())
    }

    /// Logits for a batch, shape `n × classes`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer_forward(layer, &x)?;
        }
        Ok(x)
    }

    /// Forward pass retaining the input of every layer.
    fn forward_cached(&self, batch: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let next = layer_forward(layer, &x)?;
            inputs.push(x);
            x = next;
        }
        Ok((inputs, x))
    }
}

fn init_normal(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| std * rng.normal()).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Gradients of every parameter, ordered like [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_compatible(&self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Architecture(format!(
                "gradient sets differ: {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Full flattened inner product.
    pub fn dot(&self, other: &Gradients) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| tensor::dot(a.data(), b.data()))
            .sum())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| t.scale(alpha)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, alpha)?;
        }
        Ok(())
    }
}

/// Cached input and per-example incoming gradient of one parameterized layer.
#[derive(Clone, Debug)]
pub struct TapeEntry {
    pub layer: usize,
    pub kind: ParamKind,
    /// Shape of the layer's parameter tensor.
    pub param_shape: Vec<usize>,
    /// Layer input `x`, batch-first.
    pub input: Tensor,
    /// Row `i` is `∂ℓ_i/∂x'`, the gradient of example `i`'s own loss with
    /// respect to the layer output.
    pub incoming: Tensor,
}

/// Per-layer artifacts of one backward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub step: usize,
    pub layer_count: usize,
    pub entries: Vec<TapeEntry>,
}

impl LayerTape {
    pub fn batch_size(&self) -> usize {
        self.entries.first().map_or(0, |e| e.incoming.rows())
    }

    /// Rebuilds example `i`'s full gradient from the tape.
    ///
    /// Materializes a parameter-sized buffer; used by tests and the naive
    /// path, never by the alignment kernels.
    pub fn per_example_gradient(&self, i: usize, net: &Network) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(net);
        let param_layers = net.param_layers();
        if param_layers.len() != self.entries.len() {
            return Err(Error::Architecture("tape does not match network".into()));
        }
        for ((entry, grad), (layer, kind)) in
            self.entries.iter().zip(&mut out.tensors).zip(param_layers)
        {
            if entry.layer != layer || entry.kind != kind {
                return Err(Error::Architecture("tape does not match network".into()));
            }
            let x = entry.input.row(i);
            let d = entry.incoming.row(i);
            match kind {
                ParamKind::Bias => grad.data_mut().copy_from_slice(d),
                ParamKind::Linear => {
                    let d2 = d.len();
                    for (a, &xa) in x.iter().enumerate() {
                        for (b, &db) in d.iter().enumerate() {
                            grad.data_mut()[a * d2 + b] = xa * db;
                        }
                    }
                }
                ParamKind::Conv => {
                    let ks = grad.shape().to_vec();
                    let (cout, cin, c1, c2) = (ks[0], ks[1], ks[2], ks[3]);
                    let s = entry.input.shape();
                    let (h, w) = (s[2], s[3]);
                    let hw = h * w;
                    let g = grad.data_mut();
                    for o in 0..cout {
                        for c in 0..cin {
                            let off = (o * cin + c) * c1 * c2;
                            tensor::conv2d_kernel_grad_acc(
                                &x[c * hw..(c + 1) * hw],
                                &d[o * hw..(o + 1) * hw],
                                h,
                                w,
                                c1,
                                c2,
                                &mut g[off..off + c1 * c2],
                            );
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Result of [`loss_and_backward`].
#[derive(Clone, Debug)]
pub struct Backward {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    /// Gradients of the mean loss.
    pub grads: Gradients,
    pub tape: LayerTape,
}

/// Mean softmax cross-entropy, gradients, and the layer tape.
pub fn loss_and_backward(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<Backward> {
    let (loss, grads, tape) = backward_impl(net, batch, labels, true)?;
    Ok(Backward {
        loss,
        grads,
        tape: tape.expect("tape requested"),
    })
}

/// Like [`loss_and_backward`] but skips tape capture.
pub fn loss_and_grads(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (loss, grads, _) = backward_impl(net, batch, labels, false)?;
    Ok((loss, grads))
}

/// Mean softmax cross-entropy without gradients.
pub fn loss(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(batch)?;
    check_labels(labels, logits.rows(), net.classes())?;
    Ok(softmax_cross_entropy(&logits, labels).0)
}

/// Fraction of examples whose arg-max logit equals the label.
pub fn accuracy(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(batch)?;
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            argmax == labels[i]
        })
        .count();
    Ok(correct as f64 / logits.rows().max(1) as f64)
}

/// One gradient set per example, each equal to the singleton-batch gradient.
pub fn per_example_grads(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Vec<Gradients>> {
    let n = net.check_batch(batch)?;
    check_labels(labels, n, net.classes())?;
    par::map_range(n, |i| {
        let single = batch.select_rows(&[i]);
        loss_and_grads(net, &single, &labels[i..=i]).map(|(_, g)| g)
    })
    .into_iter()
    .collect()
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(dim_err("labels", &[labels.len()], &[n]));
    }
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Returns the mean loss and `∂(mean loss)/∂logits`.
fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.rows();
    let c = logits.row_len();
    let mut grad = Tensor::zeros(vec![n, c]);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]];
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp() / n as f64;
        }
        g[labels[i]] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

fn backward_impl(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    capture: bool,
) -> Result<(f64, Gradients, Option<LayerTape>)> {
    let (mut inputs, logits) = net.forward_cached(batch)?;
    let n = logits.rows();
    check_labels(labels, n, net.classes())?;
    let (loss, mut dout) = softmax_cross_entropy(&logits, labels);

    let first_param = net
        .layers
        .iter()
        .position(|l| l.param().is_some())
        .unwrap_or(0);
    let mut grads_rev = Vec::new();
    let mut entries_rev = Vec::new();
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let x = &inputs[idx];
        let need_dx = idx > first_param;
        let (pgrad, dx) = layer_backward(layer, x, &dout, need_dx)?;
        if let Some(g) = pgrad {
            grads_rev.push(g);
            if capture {
                let input = std::mem::replace(&mut inputs[idx], Tensor::zeros([0]));
                entries_rev.push(TapeEntry {
                    layer: idx,
                    kind: layer.kind().expect("parameterized"),
                    param_shape: layer.param().expect("parameterized").shape().to_vec(),
                    input,
                    incoming: dout.scale(n as f64),
                });
            }
        }
        match dx {
            Some(dx) => dout = dx,
            None => break,
        }
    }
    grads_rev.reverse();
    entries_rev.reverse();
    let tape = capture.then_some(LayerTape {
        step: 0,
        layer_count: net.layers.len(),
        entries: entries_rev,
    });
    Ok((loss, Gradients { tensors: grads_rev }, tape))
}

fn layer_forward(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Linear { weight } => {
            if x.ndim() != 2 {
                return Err(dim_err("linear", x.shape(), weight.shape()));
            }
            x.matmul(weight)
        }
        Layer::Bias { bias } => {
            if x.shape()[1..] != *bias.shape() {
                return Err(dim_err("bias", x.shape(), bias.shape()));
            }
            let mut out = x.clone();
            let len = bias.len();
            par::for_each_chunk_mut(out.data_mut(), len, |_, row| {
                for (r, &b) in row.iter_mut().zip(bias.data()) {
                    *r += b;
                }
            });
            Ok(out)
        }
        Layer::Conv { kernel } => conv_forward(x, kernel),
        Layer::Relu => Ok(x.relu()),
        Layer::Flatten => {
            let n = x.rows();
            let rest = x.row_len();
            x.clone().reshape(vec![n, rest])
        }
    }
}

fn conv_dims(
    x: &Tensor,
    kernel: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let ks = kernel.shape();
    match (x.shape(), ks) {
        ([n, cin, h, w], [cout, kin, c1, c2]) if cin == kin => {
            tensor::check_odd_kernel(*c1, *c2)?;
            Ok((*n, *cin, *h, *w, *cout, *c1, *c2))
        }
        _ => Err(dim_err("conv", x.shape(), ks)),
    }
}

fn conv_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, cin, h, w, cout, c1, c2) = conv_dims(x, kernel)?;
    let hw = h * w;
    let kk = c1 * c2;
    let mut out = vec![0.0; n * cout * hw];
    par::for_each_chunk_mut(&mut out, cout * hw, |i, ex_out| {
        let xi = x.row(i);
        for o in 0..cout {
            let dst = &mut ex_out[o * hw..(o + 1) * hw];
            for c in 0..cin {
                let k = &kernel.data()[(o * cin + c) * kk..(o * cin + c + 1) * kk];
                tensor::conv2d_acc(&xi[c * hw..(c + 1) * hw], h, w, k, c1, c2, dst);
            }
        }
    });
    Tensor::new(vec![n, cout, h, w], out)
}

/// Returns `(parameter gradient, input gradient)`.
fn layer_backward(
    layer: &Layer,
    x: &Tensor,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    match layer {
        Layer::Linear { weight } => {
            let dw = x.t_matmul(dout)?;
            let dx = if need_dx {
                Some(dout.matmul_t(weight)?)
            } else {
                None
            };
            Ok((Some(dw), dx))
        }
        Layer::Bias { bias } => {
            let mut db = vec![0.0; bias.len()];
            for i in 0..dout.rows() {
                tensor::axpy(1.0, dout.row(i), &mut db);
            }
            let dx = need_dx.then(|| dout.clone());
            Ok((Some(Tensor::new(bias.shape().to_vec(), db)?), dx))
        }
        Layer::Conv { kernel } => {
            let (n, cin, h, w, cout, c1, c2) = conv_dims(x, kernel)?;
            let hw = h * w;
            let kk = c1 * c2;
            let mut dk = vec![0.0; cout * cin * kk];
            par::for_each_chunk_mut(&mut dk, kk, |pair, dst| {
                let (o, c) = (pair / cin, pair % cin);
                for i in 0..n {
                    let xi = &x.row(i)[c * hw..(c + 1) * hw];
                    let di = &dout.row(i)[o * hw..(o + 1) * hw];
                    tensor::conv2d_kernel_grad_acc(xi, di, h, w, c1, c2, dst);
                }
            });
            let dx = if need_dx {
                let flipped: Vec<Vec<f64>> = (0..cout * cin)
                    .map(|p| tensor::flip_kernel(&kernel.data()[p * kk..(p + 1) * kk], c1, c2))
                    .collect();
                let mut dx = vec![0.0; n * cin * hw];
                par::for_each_chunk_mut(&mut dx, cin * hw, |i, ex| {
                    let di = dout.row(i);
                    for c in 0..cin {
                        let dst = &mut ex[c * hw..(c + 1) * hw];
                        for o in 0..cout {
                            tensor::conv2d_acc(
                                &di[o * hw..(o + 1) * hw],
                                h,
                                w,
                                &flipped[o * cin + c],
                                c1,
                                c2,
                                dst,
                            );
                        }
                    }
                });
                Some(Tensor::new(x.shape().to_vec(), dx)?)
            } else {
                None
            };
            Ok((Some(Tensor::new(kernel.shape().to_vec(), dk)?), dx))
        }
        Layer::Relu => {
            let dx = need_dx.then(|| {
                let data = dout
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            });
            Ok((None, dx))
        }
        Layer::Flatten => Ok((
            None,
            need_dx.then(|| dout.clone().reshape(x.shape().to_vec()).expect("same size")),
        )),
    }
}

#[cfg(test)]
mod tests;
