use rayon::prelude::*;

use super::network::forward_map;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::{tile_map, untile_map, FeatureMap, Volume};
use crate::variational::{mix_seed, sample_weights, FfgPosterior, WeightSet};

/// Deterministic class probabilities for a whole (preprocessed) volume,
/// predicted tile by tile and reassembled.
pub fn predict_volume(
    spec: &NetworkSpec,
    weights: &WeightSet,
    volume: &Volume,
    tile: usize,
) -> Result<FeatureMap> {
    let tiles = tile_map(&volume.clone().into_feature_map(), tile)?;
    let probs = tiles
        .par_iter()
        .map(|t| forward_map(spec, weights, t))
        .collect::<Result<Vec<_>>>()?;
    untile_map(&probs, volume.dims(), tile)
}

/// Mean of the predicted class probabilities over `mc_samples` weight draws
/// from `q`. Sample `s` draws its weights with seed `mix_seed(seed, s)`.
pub fn predict_mc(
    spec: &NetworkSpec,
    q: &FfgPosterior,
    volume: &Volume,
    mc_samples: usize,
    tile: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if mc_samples == 0 {
        return Err(Error::InvalidInput("mc_samples must be at least 1".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = None;
    for s in 0..mc_samples {
        let w = sample_weights(q, mix_seed(seed, s as u64));
        let p = predict_volume(spec, &w, volume, tile)?;
        let a = acc.get_or_insert_with(|| vec![0.0; p.data().len()]);
        for (x, y) in a.iter_mut().zip(p.data()) {
            *x += *y as f64;
        }
        shape = Some((p.channels(), p.dims()));
    }
    let (channels, dims) = shape.expect("at least one sample");
    let inv = 1.0 / mc_samples as f64;
    FeatureMap::new(
        acc.unwrap().into_iter().map(|x| (x * inv) as f32).collect(),
        channels,
        dims,
    )
}
