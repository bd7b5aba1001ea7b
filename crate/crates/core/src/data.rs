//! Datasets: CIFAR-10 binary ingestion, synthetic generators, noisy splits
//! and split-aware batch sampling.

use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 record: one label byte and a 3×32×32 image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Examples stacked along the first axis with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() < 2 || images.rows() != labels.len() {
            return Err(dim_err("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Seeded shuffle, then the first `n_first` examples and the rest.
    pub fn split_off(&self, n_first: usize, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let n_first = n_first.min(order.len());
        (
            self.subset(&order[..n_first]),
            self.subset(&order[n_first..]),
        )
    }
}

/// Reads one or more CIFAR-10 binary batch files.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        parse_cifar10(&bytes, &mut pixels, &mut labels).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        CIFAR_CLASSES,
    )
}

fn parse_cifar10(bytes: &[u8], pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() - whole
            ),
        });
    }
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label byte {label} outside 0..=9"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(())
}

/// Writes a `M×3×32×32` dataset in CIFAR-10 binary layout, quantizing
/// pixels to `round(255·x)`.
pub fn write_cifar10_binary(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.example_shape() != [3, 32, 32] || ds.class_count() > CIFAR_CLASSES {
        return Err(dim_err("write_cifar10", ds.example_shape(), &[3, 32, 32]));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(
            ds.images
                .row(i)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Gaussian clusters in `dims` dimensions with `σ = 0.3`.
///
/// Class means are `±0.5` per coordinate: class 0 at `+0.5·𝟙`, class 1 at
/// `−0.5·𝟙`, further classes at seeded random sign patterns. Examples are
/// ordered by class.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || dims == 0 {
        return Err(Error::Config(format!(
            "synth_blobs needs at least 2 classes and 1 dimension, got {classes} and {dims}"
        )));
    }
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| match c {
            0 => vec![0.5; dims],
            1 => vec![-0.5; dims],
            _ => (0..dims)
                .map(|_| if rng.bernoulli(0.5) { 0.5 } else { -0.5 })
                .collect(),
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + 0.3 * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![classes * per_class, dims], data)?,
        labels,
        classes,
    )
}

/// Small `channels×size×size` images in `[0, 1]`.
///
/// Each class has a low-amplitude prototype around a mid-grey background
/// that is symmetric under left-right and up-down flips; examples add
/// pixel noise of std `noise`.
pub fn synth_images(
    classes: usize,
    per_class: usize,
    channels: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "pixel noise must be non-negative, got {noise}"
        )));
    }
    if classes < 2 || channels == 0 || size == 0 {
        return Err(Error::Config(format!(
            "synth_images needs at least 2 classes and a non-empty image, got {classes} classes"
        )));
    }
    let mut rng = Rng::new(seed);
    let plane = size * size;
    let half = size.div_ceil(2);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let quadrant: Vec<f64> = (0..channels * half * half)
                .map(|_| 0.2 * rng.normal())
                .collect();
            let mut img = vec![0.0; channels * plane];
            for c in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let (qy, qx) = (y.min(size - 1 - y), x.min(size - 1 - x));
                        img[c * plane + y * size + x] =
                            (0.5 + quadrant[(c * half + qy) * half + qx]).clamp(0.0, 1.0);
                    }
                }
            }
            img
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * channels * plane);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(
                proto
                    .iter()
                    .map(|p| (p + noise * rng.normal()).clamp(0.0, 1.0)),
            );
            labels.push(c);
        }
    }
    let n = classes * per_class;
    Dataset::new(
        Tensor::new(vec![n, channels, size, size], data)?,
        labels,
        classes,
    )
}

/// A dataset partitioned into `S` near-equal splits, some with noised
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    dataset: Dataset,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    noisy: Vec<bool>,
}

impl SplitDataset {
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn splits(&self) -> usize {
        self.members.len()
    }

    /// Split index of every example.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, split: usize) -> &[usize] {
        &self.members[split]
    }

    pub fn is_noisy(&self, split: usize) -> bool {
        self.noisy[split]
    }
}

/// Shuffles, assigns round-robin to `splits` parts and replaces every label
/// of `noisy_split` with a uniform draw over all classes.
pub fn make_noisy_splits(
    ds: &Dataset,
    splits: usize,
    noisy_split: usize,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    if splits < 2 || noisy_split >= splits {
        return Err(Error::Config(format!(
            "need at least 2 splits and a noisy split below {splits}, got noisy split {noisy_split}"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let mut assignment = vec![0; ds.len()];
    let mut members = vec![Vec::with_capacity(ds.len() / splits + 1); splits];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % splits;
        members[pos % splits].push(i);
    }
    for m in &mut members {
        m.sort_unstable();
    }
    let mut dataset = ds.clone();
    for &i in &members[noisy_split] {
        dataset.labels[i] = rng.below(ds.class_count);
    }
    let mut noisy = vec![false; splits];
    noisy[noisy_split] = true;
    Ok(SplitDataset {
        dataset,
        assignment,
        members,
        noisy,
    })
}

/// A sampled training batch with the split each example came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub splits: Vec<usize>,
}

/// Per example: split `~ probs`, then a uniform member of that split.
pub fn sample_batch(
    sds: &SplitDataset,
    probs: &[f64],
    n: usize,
    rng: &mut Rng,
) -> Result<SplitBatch> {
    if probs.len() != sds.splits() {
        return Err(Error::Probability(format!(
            "{} probabilities for {} splits",
            probs.len(),
            sds.splits()
        )));
    }
    let mut splits = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.categorical(probs)?;
        let members = &sds.members[s];
        if members.is_empty() {
            return Err(Error::Sampling(format!("split {s} is empty")));
        }
        splits.push(s);
        indices.push(members[rng.below(members.len())]);
    }
    Ok(SplitBatch {
        inputs: sds.dataset.images.select_rows(&indices),
        labels: indices.iter().map(|&i| sds.dataset.labels[i]).collect(),
        indices,
        splits,
    })
}
