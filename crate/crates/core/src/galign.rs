//! Per-example gradient-alignment kernels.
//!
//! Given a reference gradient `g` (typically the next step's batch gradient)
//! these compute `r_i = <∇_θ ℓ_i, g>` for every example of a recorded batch
//! directly from the [`LayerTape`], without forming any per-example
//! gradient:
//!
//! * bias: `r_i = <(∂ℓ/∂x')_i, g>`
//! * linear: `r_i = <x_i · g, (∂ℓ/∂x')_i>`, one batched matmul `x · g`
//! * convolution: `r_i = Σ_p (∂ℓ/∂x')_{i,p} · (x_i * g)_p`, i.e. a forward
//!   convolution with `g` in place of the kernel followed by a dot product
//!
//! The full-gradient alignment is the sum of the per-layer alignments.

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::nn::{self, Gradients, LayerTape, Network, ParamKind};
use crate::par;
use crate::tensor::{self, Tensor};

/// Per-example rewards and, optionally, their per-layer breakdown.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentResult {
    pub rewards: Vec<f64>,
    /// `n × layer_count`; non-parameterized layers contribute zero columns.
    pub per_layer_contributions: Option<Vec<Vec<f64>>>,
}

/// `result[i] = <incoming[i], g_bias>`.
pub fn bias_alignment(incoming: &Tensor, g_bias: &Tensor) -> Result<Vec<f64>> {
    if incoming.ndim() == 0 || incoming.shape()[1..] != *g_bias.shape() {
        return Err(dim_err("bias_alignment", incoming.shape(), g_bias.shape()));
    }
    Ok(par::map_range(incoming.rows(), |i| {
        tensor::dot(incoming.row(i), g_bias.data())
    }))
}

/// `result[i] = <x_i · g, incoming_i>` for `x: n×d1`, `incoming: n×d2`,
/// `g: d1×d2`.
pub fn linear_alignment(x: &Tensor, incoming: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    let ok = matches!(
        (x.shape(), incoming.shape(), g.shape()),
        ([n, d1], [m, d2], [e1, e2]) if n == m && d1 == e1 && d2 == e2
    );
    if !ok {
        return Err(dim_err("linear_alignment", x.shape(), g.shape()));
    }
    let d2 = g.shape()[1];
    Ok(par::map_range(x.rows(), |i| {
        // one row of x·g at a time; scratch is O(d2)
        let mut xg = vec![0.0; d2];
        tensor::matvec_row(x.row(i), g.data(), d2, &mut xg);
        tensor::dot(&xg, incoming.row(i))
    }))
}

/// Convolution alignment.
///
/// Single channel: `x, incoming: n×H×W`, `g: c1×c2`. Multi-channel:
/// `x: n×C_in×H×W`, `incoming: n×C_out×H×W`, `g: C_out×C_in×c1×c2`, summing
/// the single-channel expression over every `(out, in)` channel pair.
pub fn conv_alignment(x: &Tensor, incoming: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    let err = || dim_err("conv_alignment", x.shape(), g.shape());
    let (n, cin, cout, h, w, c1, c2) = match (x.shape(), incoming.shape(), g.shape()) {
        ([n, h, w], [m, hh, ww], [c1, c2]) if n == m && h == hh && w == ww => {
            (*n, 1, 1, *h, *w, *c1, *c2)
        }
        ([n, cin, h, w], [m, cout, hh, ww], [go, gi, c1, c2])
            if n == m && h == hh && w == ww && go == cout && gi == cin =>
        {
            (*n, *cin, *cout, *h, *w, *c1, *c2)
        }
        _ => return Err(err()),
    };
    tensor::check_odd_kernel(c1, c2)?;
    let hw = h * w;
    let kk = c1 * c2;
    Ok(par::map_range(n, |i| {
        let xi = x.row(i);
        let di = incoming.row(i);
        let mut xg = vec![0.0; hw];
        let mut acc = 0.0;
        for o in 0..cout {
            xg.fill(0.0);
            for c in 0..cin {
                let k = &g.data()[(o * cin + c) * kk..(o * cin + c + 1) * kk];
                tensor::conv2d_acc(&xi[c * hw..(c + 1) * hw], h, w, k, c1, c2, &mut xg);
            }
            acc += tensor::dot(&xg, &di[o * hw..(o + 1) * hw]);
        }
        acc
    }))
}

/// Sums the layer kernels over every tape entry.
pub fn assemble_alignment(tape: &LayerTape, reference: &Gradients) -> Result<AlignmentResult> {
    assemble_impl(tape, reference, false)
}

/// [`assemble_alignment`] with the per-layer breakdown filled in.
pub fn assemble_alignment_with_diagnostics(
    tape: &LayerTape,
    reference: &Gradients,
) -> Result<AlignmentResult> {
    assemble_impl(tape, reference, true)
}

fn assemble_impl(
    tape: &LayerTape,
    reference: &Gradients,
    diagnostics: bool,
) -> Result<AlignmentResult> {
    if tape.entries.len() != reference.tensors.len() {
        return Err(Error::Architecture(format!(
            "tape has {} parameterized layers, reference gradient has {}",
            tape.entries.len(),
            reference.tensors.len()
        )));
    }
    let n = tape.batch_size();
    let per_entry: Vec<Result<Vec<f64>>> = tape
        .entries
        .iter()
        .zip(&reference.tensors)
        .map(|(entry, g)| {
            if g.shape() != entry.param_shape.as_slice() {
                return Err(Error::Architecture(format!(
                    "layer {} expects a {:?} gradient, got {:?}",
                    entry.layer,
                    entry.param_shape,
                    g.shape()
                )));
            }
            let r = match entry.kind {
                ParamKind::Bias => bias_alignment(&entry.incoming, g),
                ParamKind::Linear => linear_alignment(&entry.input, &entry.incoming, g),
                ParamKind::Conv => conv_alignment(&entry.input, &entry.incoming, g),
            };
            r.map_err(|e| {
                Error::Architecture(format!("layer {} ({:?}): {e}", entry.layer, entry.kind))
            })
        })
        .collect();

    let mut rewards = vec![0.0; n];
    let mut contributions = diagnostics.then(|| vec![vec![0.0; tape.layer_count]; n]);
    for (entry, layer_rewards) in tape.entries.iter().zip(per_entry) {
        let layer_rewards = layer_rewards?;
        for (i, r) in layer_rewards.iter().enumerate() {
            rewards[i] += r;
        }
        if let Some(c) = contributions.as_mut() {
            for (i, r) in layer_rewards.into_iter().enumerate() {
                c[i][entry.layer] = r;
            }
        }
    }
    Ok(AlignmentResult {
        rewards,
        per_layer_contributions: contributions,
    })
}

/// Reference implementation: explicit per-example gradients dotted with the
/// flattened reference gradient.
pub fn naive_alignment_oracle(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    reference: &Gradients,
) -> Result<Vec<f64>> {
    nn::per_example_grads(net, batch, labels)?
        .iter()
        .map(|g| g.dot(reference))
        .collect()
}
