//! Shape-preserving dilated segmentation networks: architecture description,
//! MAP and variational objectives with exact gradients, Adam training and
//! Monte Carlo prediction.

mod adam;
mod config;
mod network;
mod predict;
mod spec;
mod train;

pub use adam::{adam_step, AdamState};
pub use config::{ModelConfig, TrainConfig};
pub use network::{
    elbo_objective, forward_map, init_map_weights, map_objective, nll_from_logit_map, nll_loss,
    objective_and_grad, relu_pattern, Example, NetParams, Noise, ObjectiveValue, ParamMode,
};
pub use predict::{predict_mc, predict_volume};
pub use spec::{Activation, LayerSpec, NetworkSpec, MESHNET_DILATIONS};
pub use train::{
    batch_indices, loss_log_csv, train, write_loss_log, ConvergenceMonitor, LossRecord,
    TrainOutcome,
};
