//! Distributed weight consolidation for Gaussian variational segmentation
//! networks.
//!
//! Sites train fully factorized Gaussian posteriors from a shared prior,
//! exchange them as checkpoints, and the posteriors are fused in closed form
//! and optionally fine-tuned. The crate also carries the baselines (per-site
//! and pooled MAP, output-averaging ensembles, sequential continual
//! learning), a synthetic multi-site data generator and Dice evaluation.

pub mod consolidation;
mod conv_kernel;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod meshnet;
pub mod sites;
pub mod tensor;
pub mod variational;

pub use consolidation::{
    clamp_site_variances, consolidate, consolidate_checkpoints, read_checkpoint, write_checkpoint,
    CheckpointKind, ConsolidatedPosterior, SiteCheckpoint,
};
pub use error::{Error, Result};
pub use meshnet::{NetworkSpec, TrainConfig};
pub use tensor::{dilated_conv3d, naive_conv_oracle, FeatureMap, KernelShape, Volume};
pub use variational::{kl_ffg, sample_weights, FfgPosterior, FfgTensor, GaussianPrior, WeightSet};
