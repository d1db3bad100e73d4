use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::io_util;

/// Optimization and evaluation settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sub-volumes per mini-batch.
    pub batch_size: usize,
    /// `N` of the `N/M` data-term scale; defaults to the number of training
    /// sub-volumes.
    pub dataset_size: Option<usize>,
    pub max_steps: usize,
    /// Steps per non-overlapping window of the convergence test.
    pub convergence_window: usize,
    /// Stop once consecutive window means differ by less than this fraction.
    pub convergence_tolerance: f64,
    pub seed: u64,
    /// Posterior samples averaged at prediction time.
    pub mc_samples: usize,
    /// Replaces `N` outright, e.g. to give the data term the weight of one
    /// volume during fine-tuning.
    pub data_weight_override: Option<usize>,
    /// Initial posterior sigma when a variational network starts from point
    /// weights.
    pub init_sigma: f32,
    /// Sigma attached to MAP weights when they are used as a prior.
    pub map_prior_sigma: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 10,
            dataset_size: None,
            max_steps: 2000,
            convergence_window: 50,
            convergence_tolerance: 0.01,
            seed: 0,
            mc_samples: 10,
            data_weight_override: None,
            init_sigma: 0.001,
            map_prior_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.dataset_size == Some(0) || self.data_weight_override == Some(0) {
            return fail("dataset sizes must be positive");
        }
        if self.convergence_window == 0 {
            return fail("convergence_window must be positive");
        }
        if !(self.convergence_tolerance > 0.0) {
            return fail("convergence_tolerance must be positive");
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1");
        }
        if !(self.init_sigma > 0.0 && self.map_prior_sigma > 0.0) {
            return fail("sigmas must be positive");
        }
        Ok(())
    }

    /// The `N` used to scale the data term for a training set of `examples`.
    pub fn data_scale(&self, examples: usize) -> f64 {
        self.data_weight_override
            .or(self.dataset_size)
            .unwrap_or(examples) as f64
    }
}

/// Network architecture plus training settings, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::atomic_write_str(path, &self.to_toml())
    }
}
