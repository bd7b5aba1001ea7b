use inloop::data::{load_cifar10_binary, synth_blobs, synth_images, Dataset};
use inloop::nn::Network;
use inloop::Rng;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{CliError, Result};

/// Which synthetic generator backs `dataset = "synth"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Images,
}

/// Loads the configured data. CIFAR files are subsampled to
/// `classes × per_class` examples when larger.
pub fn load(cfg: &ExperimentConfig, kind: SynthKind, seed: u64) -> Result<Dataset> {
    match cfg.dataset_source()? {
        DatasetSource::Synth => Ok(match kind {
            SynthKind::Blobs => synth_blobs(cfg.classes, cfg.per_class, cfg.dims, seed)?,
            SynthKind::Images => synth_images(
                cfg.classes,
                cfg.per_class,
                cfg.channels,
                cfg.image_size,
                cfg.pixel_noise,
                seed,
            )?,
        }),
        source @ DatasetSource::Cifar10(_) => {
            let ds = load_cifar10_binary(&source.files()?)?;
            let want = cfg.classes * cfg.per_class;
            if ds.len() <= want {
                return Ok(ds);
            }
            let mut idx = Rng::new(seed)
                .derive(&[0xc1fa])
                .choice_without_replacement(ds.len(), want)?;
            idx.sort_unstable();
            Ok(ds.subset(&idx))
        }
    }
}

/// Builds the configured network for `ds` and checks its output width.
pub fn network(cfg: &ExperimentConfig, ds: &Dataset, rng: &mut Rng) -> Result<Network> {
    let net = Network::from_specs(ds.example_shape(), &cfg.layer_specs()?, rng)
        .map_err(|e| CliError::Config(format!("network does not fit the data: {e}")))?;
    if net.classes() != ds.class_count() {
        return Err(CliError::Config(format!(
            "network has {} outputs for {} classes",
            net.classes(),
            ds.class_count()
        )));
    }
    Ok(net)
}
