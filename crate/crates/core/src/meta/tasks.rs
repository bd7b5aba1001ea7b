//! Batch sources for the two experiment families.

use crate::augment::{augment_batch, Registry};
use crate::data::{sample_batch, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::meta::{MetaTask, StepBatch};
use crate::policies::{ua_sample, ActionRecord, OlaPolicy, SplitPolicy};
use crate::rng::Rng;

/// Every step picks a split per example from the policy, then a uniform
/// member of that split.
pub struct SplitTask {
    data: SplitDataset,
    batch_size: usize,
    rng: Rng,
}

impl SplitTask {
    pub fn new(data: SplitDataset, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            data,
            batch_size,
            rng,
        })
    }

    pub fn data(&self) -> &SplitDataset {
        &self.data
    }
}

impl MetaTask<SplitPolicy> for SplitTask {
    fn batch(&mut self, _step: u64, policy: &SplitPolicy) -> Result<StepBatch> {
        if policy.splits() != self.data.splits() {
            return Err(Error::Config(format!(
                "policy over {} splits for data with {}",
                policy.splits(),
                self.data.splits()
            )));
        }
        let b = sample_batch(&self.data, &policy.probs(), self.batch_size, &mut self.rng)?;
        Ok(StepBatch {
            inputs: b.inputs,
            labels: b.labels,
            actions: Some(
                b.splits
                    .into_iter()
                    .map(|index| ActionRecord::Split { index })
                    .collect(),
            ),
        })
    }
}

/// Where augmentation actions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentArm {
    /// Sampled from the learned OLA policy.
    Learned,
    /// Fixed uniform baseline with strengths in `0..=strength_cap`.
    Uniform { strength_cap: u8 },
}

/// Uniformly sampled image batches, augmented on odd steps.
///
/// With interleaving on, even steps (counting from 0) are plain: they
/// sample no actions, train normally and provide the reference gradient
/// for the augmented step before them.
pub struct AugmentTask {
    data: Dataset,
    registry: Registry,
    batch_size: usize,
    arm: AugmentArm,
    interleave: bool,
    data_rng: Rng,
    action_rng: Rng,
    image_base: Rng,
}

impl AugmentTask {
    pub fn new(
        data: Dataset,
        registry: Registry,
        batch_size: usize,
        arm: AugmentArm,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || data.is_empty() {
            return Err(Error::Config(
                "augmentation task needs data and a positive batch size".into(),
            ));
        }
        if data.example_shape().len() != 3 {
            return Err(Error::Config(format!(
                "augmentation needs C×H×W examples, got {:?}",
                data.example_shape()
            )));
        }
        let root = Rng::new(seed);
        Ok(Self {
            data,
            registry,
            batch_size,
            arm,
            interleave: true,
            data_rng: root.derive(&[0]),
            action_rng: root.derive(&[1]),
            image_base: root.derive(&[2]),
        })
    }

    pub fn with_interleave(mut self, interleave: bool) -> Self {
        self.interleave = interleave;
        self
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn is_plain_step(&self, step: u64) -> bool {
        self.interleave && step.is_multiple_of(2)
    }
}

impl MetaTask<OlaPolicy> for AugmentTask {
    fn batch(&mut self, step: u64, policy: &OlaPolicy) -> Result<StepBatch> {
        let indices: Vec<usize> = (0..self.batch_size)
            .map(|_| self.data_rng.below(self.data.len()))
            .collect();
        let inputs = self.data.images().select_rows(&indices);
        let labels = indices.iter().map(|&i| self.data.labels()[i]).collect();
        if self.is_plain_step(step) {
            return Ok(StepBatch {
                inputs,
                labels,
                actions: None,
            });
        }
        let actions = (0..self.batch_size)
            .map(|_| match self.arm {
                AugmentArm::Learned => {
                    if policy.ops() != self.registry.len() {
                        return Err(Error::Config(format!(
                            "policy over {} ops for a registry of {}",
                            policy.ops(),
                            self.registry.len()
                        )));
                    }
                    policy.sample(&mut self.action_rng)
                }
                AugmentArm::Uniform { strength_cap } => {
                    ua_sample(self.registry.len(), strength_cap, &mut self.action_rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs = augment_batch(&inputs, &actions, &self.registry, &self.image_base, step)?;
        Ok(StepBatch {
            inputs,
            labels,
            actions: Some(actions),
        })
    }
}
