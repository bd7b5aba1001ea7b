//! Tensor-native image augmentations addressed by name.
//!
//! Images are `C×H×W` tensors with values in `[0, 1]`. Every op takes an
//! integer strength `k ∈ {0, …, 30}` mapped linearly onto its parameter
//! range, preserves the shape and clamps its output back into `[0, 1]`.

use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::policies::{ActionRecord, STRENGTH_LEVELS};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Names of the built-in ops, in registry order.
pub const BUILTIN_OPS: [&str; 10] = [
    "identity",
    "flip_lr",
    "flip_ud",
    "translate_x",
    "translate_y",
    "brightness",
    "contrast",
    "invert",
    "cutout",
    "gaussian_noise_canary",
];

/// Highest strength level.
pub const MAX_STRENGTH: u8 = (STRENGTH_LEVELS - 1) as u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Identity,
    FlipLr,
    FlipUd,
    TranslateX,
    TranslateY,
    Brightness,
    Contrast,
    Invert,
    Cutout,
    GaussianNoise,
}

/// A named op with its strength range.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationOp {
    name: String,
    kind: OpKind,
    range: (f64, f64),
}

impl AugmentationOp {
    pub fn builtin(name: &str) -> Result<Self> {
        let (kind, range) = match name {
            "identity" => (OpKind::Identity, (0.0, 0.0)),
            "flip_lr" => (OpKind::FlipLr, (0.0, 0.0)),
            "flip_ud" => (OpKind::FlipUd, (0.0, 0.0)),
            "translate_x" => (OpKind::TranslateX, (0.0, 8.0)),
            "translate_y" => (OpKind::TranslateY, (0.0, 8.0)),
            "brightness" => (OpKind::Brightness, (0.2, 1.8)),
            "contrast" => (OpKind::Contrast, (0.2, 1.8)),
            "invert" => (OpKind::Invert, (0.0, 0.0)),
            "cutout" => (OpKind::Cutout, (0.0, 12.0)),
            "gaussian_noise_canary" => (OpKind::GaussianNoise, (0.0, 1.0)),
            _ => return Err(Error::Registry(name.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            kind,
            range,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn strength_range(&self) -> (f64, f64) {
        self.range
    }

    /// `lo + (hi - lo) · k / 30`.
    pub fn parameter(&self, k: u8) -> f64 {
        let (lo, hi) = self.range;
        lo + (hi - lo) * f64::from(k.min(MAX_STRENGTH)) / f64::from(MAX_STRENGTH)
    }

    /// Applies the op at strength `k`. Only cutout and the noise canary
    /// draw from `rng`.
    pub fn apply(&self, image: &Tensor, k: u8, rng: &mut Rng) -> Result<Tensor> {
        let (c, h, w) = match image.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(dim_err("augment", s, &[0, 0, 0])),
        };
        if k > MAX_STRENGTH {
            return Err(Error::Action(format!(
                "strength {k} exceeds {MAX_STRENGTH}"
            )));
        }
        let x = image.data();
        let param = self.parameter(k);
        let mut out = x.to_vec();
        match self.kind {
            OpKind::Identity => {}
            OpKind::FlipLr => {
                for row in out.chunks_mut(w) {
                    row.reverse();
                }
            }
            OpKind::FlipUd => {
                for ch in 0..c {
                    for y in 0..h {
                        let src = ch * h * w + (h - 1 - y) * w;
                        out[ch * h * w + y * w..ch * h * w + (y + 1) * w]
                            .copy_from_slice(&x[src..src + w]);
                    }
                }
            }
            OpKind::TranslateX => {
                let px = (param.round() as usize).min(w);
                for (dst, src) in out.chunks_mut(w).zip(x.chunks(w)) {
                    dst[..px].fill(0.0);
                    dst[px..].copy_from_slice(&src[..w - px]);
                }
            }
            OpKind::TranslateY => {
                let py = (param.round() as usize).min(h);
                for ch in 0..c {
                    let plane = &mut out[ch * h * w..(ch + 1) * h * w];
                    plane[..py * w].fill(0.0);
                    plane[py * w..].copy_from_slice(&x[ch * h * w..ch * h * w + (h - py) * w]);
                }
            }
            OpKind::Brightness => out.iter_mut().for_each(|v| *v *= param),
            OpKind::Contrast => {
                for plane in out.chunks_mut(h * w) {
                    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                    plane
                        .iter_mut()
                        .for_each(|v| *v = mean + (*v - mean) * param);
                }
            }
            OpKind::Invert => out.iter_mut().for_each(|v| *v = 1.0 - *v),
            OpKind::Cutout => {
                let size = param.round() as usize;
                if size > 0 {
                    let (sh, sw) = (size.min(h), size.min(w));
                    let y0 = rng.below(h - sh + 1);
                    let x0 = rng.below(w - sw + 1);
                    for plane in out.chunks_mut(h * w) {
                        for y in y0..y0 + sh {
                            plane[y * w + x0..y * w + x0 + sw].fill(0.0);
                        }
                    }
                }
            }
            OpKind::GaussianNoise => {
                for v in out.iter_mut() {
                    *v += param * rng.normal();
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Tensor::new(image.shape().to_vec(), out)
    }
}

/// Ordered set of ops; `ActionRecord` steps index into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    ops: Vec<AugmentationOp>,
}

impl Registry {
    /// Every built-in op in [`BUILTIN_OPS`] order.
    pub fn builtin() -> Self {
        Self::from_names(&BUILTIN_OPS).expect("built-in names resolve")
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut ops = Vec::with_capacity(names.len());
        for name in names {
            let op = AugmentationOp::builtin(name.as_ref())?;
            if ops.iter().any(|o: &AugmentationOp| o.name == op.name) {
                return Err(Error::Config(format!(
                    "augmentation `{}` listed twice",
                    op.name
                )));
            }
            ops.push(op);
        }
        Ok(Self { ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, index: usize) -> Option<&AugmentationOp> {
        self.ops.get(index)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.ops
            .iter()
            .position(|o| o.name == name)
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.ops.iter().map(|o| o.name.as_str()).collect()
    }
}

/// Applies the kept steps of an augmentation action in recorded order.
pub fn apply_action(
    image: &Tensor,
    action: &ActionRecord,
    registry: &Registry,
    rng: &mut Rng,
) -> Result<Tensor> {
    let ActionRecord::Augment { steps } = action else {
        return Err(Error::Action(format!(
            "cannot apply {action:?} to an image"
        )));
    };
    let mut out = image.clone();
    for step in steps.iter().filter(|s| s.keep) {
        let op = registry
            .op(step.op)
            .ok_or_else(|| Error::Action(format!("op index {} not registered", step.op)))?;
        let k = step
            .strength
            .ok_or_else(|| Error::Action(format!("kept op {} has no strength", step.op)))?;
        out = op.apply(&out, k, rng)?;
    }
    Ok(out)
}

/// Stream for example `index` of step `step`, independent of evaluation order.
pub fn image_rng(base: &Rng, step: u64, index: u64) -> Rng {
    base.derive(&[step, index])
}

/// Augments every image of a `n×C×H×W` batch with its own action.
pub fn augment_batch(
    batch: &Tensor,
    actions: &[ActionRecord],
    registry: &Registry,
    base: &Rng,
    step: u64,
) -> Result<Tensor> {
    if batch.ndim() != 4 || batch.rows() != actions.len() {
        return Err(dim_err("augment_batch", batch.shape(), &[actions.len()]));
    }
    let shape = batch.shape()[1..].to_vec();
    let images: Vec<Result<Vec<f64>>> = par::map_range(actions.len(), |i| {
        let image = Tensor::new(shape.clone(), batch.row(i).to_vec())?;
        let mut rng = image_rng(base, step, i as u64);
        apply_action(&image, &actions[i], registry, &mut rng).map(Tensor::into_data)
    });
    let mut data = Vec::with_capacity(batch.len());
    for image in images {
        data.extend(image?);
    }
    Tensor::new(batch.shape().to_vec(), data)
}
