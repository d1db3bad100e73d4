use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::network::{objective_and_grad, Example, NetParams, Noise, ObjectiveValue};
use crate::error::{Error, Result};
use crate::io_util;
use crate::variational::{mix_seed, noise_rng, GaussianPrior};

const BATCH_STREAM: u32 = 0xBA7C;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub data_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

/// Detects when the mean loss of consecutive non-overlapping windows stops
/// changing by more than a relative tolerance.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: usize,
    tolerance: f64,
    sum: f64,
    count: usize,
    window_means: Vec<f64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, tolerance: f64) -> Self {
        Self {
            window,
            tolerance,
            sum: 0.0,
            count: 0,
            window_means: Vec::new(),
        }
    }

    /// Records one loss value; true once the latest two windows agree.
    pub fn push(&mut self, loss: f64) -> bool {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return false;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        self.window_means.push(mean);
        match self.window_means.as_slice() {
            [.., prev, cur] => {
                ((prev - cur) / prev.abs().max(f64::MIN_POSITIVE)).abs() < self.tolerance
            }
            _ => false,
        }
    }

    pub fn window_means(&self) -> &[f64] {
        &self.window_means
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub log: Vec<LossRecord>,
    pub steps: usize,
    pub converged: bool,
    pub window_means: Vec<f64>,
}

/// Indices of the mini-batch for `step`; drawn without replacement when the
/// training set is large enough.
pub fn batch_indices(seed: u64, step: usize, len: usize, batch: usize) -> Vec<usize> {
    let mut rng = noise_rng(mix_seed(seed, step as u64), BATCH_STREAM, 0);
    if len >= batch {
        index::sample(&mut rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Minimizes the negated log joint (MAP parameters) or the negated ELBO
/// (variational parameters) with Adam until convergence or `max_steps`.
pub fn train(
    mut params: NetParams,
    examples: &[Example],
    prior: &GaussianPrior,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let n_scale = cfg.data_scale(examples.len());
    let mut adam = AdamState::new(params.len());
    let mut monitor = ConvergenceMonitor::new(cfg.convergence_window, cfg.convergence_tolerance);
    let mut log = Vec::new();
    let mut converged = false;
    let noise_seed = mix_seed(cfg.seed, 0x4E01_5E);
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        let idx = batch_indices(cfg.seed, step, examples.len(), cfg.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let noise = Noise::Seeded {
            seed: noise_seed,
            draw: (step * cfg.batch_size) as u32,
        };
        let (value, grad) = objective_and_grad(&params, &batch, prior, n_scale, noise, true)?;
        let grad = grad.expect("gradient requested");
        adam_step(params.as_mut_slice(), &grad, &mut adam, cfg.learning_rate);
        log.push(record(step, value));
        steps = step + 1;
        if !value.total.is_finite() {
            return Err(Error::InvalidInput(format!(
                "objective diverged at step {step}"
            )));
        }
        if monitor.push(value.total) {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        steps,
        converged,
        window_means: monitor.window_means().to_vec(),
    })
}

fn record(step: usize, v: ObjectiveValue) -> LossRecord {
    LossRecord {
        step,
        data_term: v.data_term,
        kl_term: v.kl_term,
        total: v.total,
    }
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,data_term,kl_term,total\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.data_term, r.kl_term, r.total);
    }
    out
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    io_util::atomic_write_str(path, &loss_log_csv(log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_triggers_on_flat_windows() {
        let mut m = ConvergenceMonitor::new(3, 0.01);
        for v in [10.0, 10.0, 10.0] {
            assert!(!m.push(v));
        }
        for v in [5.0, 5.0] {
            assert!(!m.push(v));
        }
        assert!(!m.push(5.0));
        assert!(!m.push(4.99));
        assert!(!m.push(4.99));
        assert!(m.push(4.99));
        assert_eq!(m.window_means().len(), 3);
    }

    #[test]
    fn batches_are_deterministic_and_distinct() {
        let a = batch_indices(3, 7, 100, 10);
        assert_eq!(a, batch_indices(3, 7, 100, 10));
        assert_ne!(a, batch_indices(3, 8, 100, 10));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert_eq!(batch_indices(1, 0, 3, 10).len(), 10);
    }

    #[test]
    fn csv_header() {
        let csv = loss_log_csv(&[LossRecord {
            step: 0,
            data_term: 1.0,
            kl_term: 0.5,
            total: 1.5,
        }]);
        assert_eq!(csv, "step,data_term,kl_term,total\n0,1,0.5,1.5\n");
    }
}
