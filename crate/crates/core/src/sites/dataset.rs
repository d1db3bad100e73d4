use rand::seq::SliceRandom;

use super::generator::LabeledVolume;
use crate::error::{Error, Result};
use crate::meshnet::Example;
use crate::tensor::{tile_volume, FeatureMap, Volume};
use crate::variational::{mix_seed, noise_rng};

const SPLIT_STREAM: u32 = 0x5B17;

/// Disjoint train/test volume indices of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_fraction: f64,
}

impl DatasetSplit {
    /// Shuffled split with `round(test_fraction · n)` test volumes, at least
    /// one of each kind. Both lists are returned sorted.
    pub fn new(volumes: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if volumes < 2 {
            return Err(Error::Config(format!(
                "a split needs at least two volumes, got {volumes}"
            )));
        }
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let n_test = ((volumes as f64 * test_fraction).round() as usize).clamp(1, volumes - 1);
        let mut order: Vec<usize> = (0..volumes).collect();
        order.shuffle(&mut noise_rng(
            mix_seed(seed, volumes as u64),
            SPLIT_STREAM,
            0,
        ));
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            train,
            test,
            test_fraction,
        })
    }
}

/// Subtracts the mean and divides by the standard deviation over all voxels.
/// Constant volumes are rejected.
pub fn zscore(volume: &Volume) -> Result<Volume> {
    let n = volume.len() as f64;
    let mean = volume.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(Error::InvalidInput(
            "cannot z-score a constant volume".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    Volume::new(
        volume
            .data()
            .iter()
            .map(|&v| ((v as f64 - mean) * inv) as f32)
            .collect(),
        volume.dims(),
    )
}

/// Z-scores a volume and cuts it into non-overlapping cubic sub-volumes.
pub fn preprocess(volume: &Volume, tile: usize) -> Result<Vec<FeatureMap>> {
    Ok(tile_volume(&zscore(volume)?, tile)?
        .into_iter()
        .map(Volume::into_feature_map)
        .collect())
}

/// Training examples (sub-volume plus its labels) from one labelled volume.
pub fn volume_examples(volume: &LabeledVolume, tile: usize) -> Result<Vec<Example>> {
    let inputs = preprocess(&volume.image, tile)?;
    let labels = tile_volume(&volume.labels, tile)?;
    inputs
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Example::new(x, y.data().iter().map(|&v| v as u32).collect()))
        .collect()
}
