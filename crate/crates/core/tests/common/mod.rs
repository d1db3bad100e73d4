#![allow(dead_code)]

use dwc_core::meshnet::{
    init_map_weights, objective_and_grad, relu_pattern, Example, NetParams, NetworkSpec, Noise,
};
use dwc_core::tensor::FeatureMap;
use dwc_core::variational::{FfgPosterior, GaussianPrior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_example(rng: &mut ChaCha8Rng, spec: &NetworkSpec, side: usize) -> Example {
    let n = side * side * side;
    let input = FeatureMap::new(
        (0..spec.input_channels * n)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
        spec.input_channels,
        [side; 3],
    )
    .unwrap();
    let labels = (0..n)
        .map(|_| rng.random_range(0..spec.classes as u32))
        .collect();
    Example::new(input, labels).unwrap()
}

pub fn perturbed_posterior(spec: &NetworkSpec, seed: u64) -> FfgPosterior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = init_map_weights(spec, seed);
    let mut post = FfgPosterior::from_point(&w, 0.1).unwrap().into_tensors();
    for t in &mut post {
        for (m, s) in t.mu.iter_mut().zip(t.sigma.iter_mut()) {
            *m += rng.random_range(-0.2..0.2);
            *s = rng.random_range(0.05..0.4);
        }
    }
    FfgPosterior::new(post).unwrap()
}

#[derive(Debug)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose ±h perturbation flips a hidden ReLU, where central
    /// differences do not estimate the derivative.
    pub straddled: usize,
}

/// Central differences in f64 against the analytic gradient, per parameter
/// group.
pub fn gradient_check(
    params: &NetParams<f64>,
    batch: &[&Example],
    prior: &GaussianPrior,
    n_scale: f64,
    noise: Noise,
    h: f64,
) -> Vec<GroupCheck> {
    let (_, grad) = objective_and_grad(params, batch, prior, n_scale, noise, true).unwrap();
    let grad = grad.unwrap();
    let base = relu_pattern(params, batch, noise).unwrap();
    let mut out = Vec::new();
    for (name, range) in params.param_groups() {
        let mut check = GroupCheck {
            name,
            max_rel: 0.0,
            checked: 0,
            straddled: 0,
        };
        for i in range {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            if relu_pattern(&plus, batch, noise).unwrap() != base
                || relu_pattern(&minus, batch, noise).unwrap() != base
            {
                check.straddled += 1;
                continue;
            }
            let fp = objective_and_grad(&plus, batch, prior, n_scale, noise, false)
                .unwrap()
                .0
                .total;
            let fm = objective_and_grad(&minus, batch, prior, n_scale, noise, false)
                .unwrap()
                .0
                .total;
            let fd = (fp - fm) / (2.0 * h);
            let a = grad[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            check.max_rel = check.max_rel.max((a - fd).abs() / denom);
            check.checked += 1;
        }
        out.push(check);
    }
    out
}

/// Gradient check passes when every group has a small error, every group has
/// checked entries, and kink exclusions leave at least half of all entries.
pub fn assert_gradients(checks: &[GroupCheck], tol: f64) {
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    let straddled: usize = checks.iter().map(|c| c.straddled).sum();
    for c in checks {
        assert!(c.max_rel < tol && c.checked > 0, "{c:?}");
    }
    assert!(
        checked >= straddled,
        "only {checked} of {} entries checked",
        checked + straddled
    );
}
