//! Trainable parameters, forward passes and exact reverse-mode gradients.
//!
//! Weight means are weight-normalized (`w_f = g_f · v_f / ‖v_f‖`); biases are
//! free. Variational networks add an unconstrained `ρ` per weight and bias with
//! `σ = softplus(ρ)`, and every layer is evaluated with the local
//! reparameterization (mean map plus `sqrt(variance map) · ε`).
//!
//! Per-example passes run in parallel over the batch; gradients are reduced in
//! batch order, so a step is bitwise reproducible for any thread count.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::{
    conv_backward_input, conv_backward_weights, conv_forward_raw, voxel_count, Dims, FeatureMap,
    Real,
};
use crate::variational::{
    fill_standard_normal, kl_gaussian, noise_rng, softplus, softplus_grad, softplus_inverse,
    FfgPosterior, FfgTensor, GaussianPrior, NamedArray, WeightSet,
};

/// One training pair: an input sub-volume and its voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: FeatureMap,
    pub labels: Vec<u32>,
}

impl Example {
    pub fn new(input: FeatureMap, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != input.voxels() {
            return Err(Error::Shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                input.voxels()
            )));
        }
        Ok(Self { input, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Map,
    Variational,
}

/// Source of the activation noise for variational passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// Example `m` of the batch at layer `l` uses stream `l`, draw `draw + m`.
    Seeded { seed: u64, draw: u32 },
    /// `ε = 0`: the pass returns the mean network.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// `(N/M)·Σ_m −log p(y_m | x_m, w)`.
    pub data_term: f64,
    /// KL to the prior (variational) or the negative log prior density up to
    /// its constant (MAP).
    pub kl_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    g: usize,
    v: usize,
    bias: usize,
    rho_w: usize,
    rho_b: usize,
    filters: usize,
    per_filter: usize,
}

/// Flat parameter vector of a network plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T: Real = f32> {
    spec: NetworkSpec,
    mode: ParamMode,
    data: Vec<T>,
    offsets: Vec<LayerOffsets>,
}

fn layout(spec: &NetworkSpec, mode: ParamMode) -> (Vec<LayerOffsets>, usize) {
    let mut at = 0;
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let per_filter = spec.in_channels(i) * l.kernel().taps();
        let f = l.filters;
        let g = at;
        let v = g + f;
        let bias = v + f * per_filter;
        at = bias + f;
        let (rho_w, rho_b) = match mode {
            ParamMode::Map => (at, at),
            ParamMode::Variational => {
                let rw = at;
                let rb = rw + f * per_filter;
                at = rb + f;
                (rw, rb)
            }
        };
        out.push(LayerOffsets {
            g,
            v,
            bias,
            rho_w,
            rho_b,
            filters: f,
            per_filter,
        });
    }
    (out, at)
}

/// Random He-normal weights with zero biases.
pub fn init_map_weights(spec: &NetworkSpec, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrays = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let shape = spec.weight_shape(i);
        let fan_in = spec.in_channels(i) * l.kernel().taps();
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        arrays.push(NamedArray {
            name: format!("layer{i}.weight"),
            shape,
            data,
        });
        arrays.push(NamedArray {
            name: format!("layer{i}.bias"),
            shape: vec![l.filters],
            data: vec![0.0; l.filters],
        });
    }
    WeightSet { arrays }
}

fn check_layout(spec: &NetworkSpec, names_shapes: &[(&str, &[usize])]) -> Result<()> {
    let expected = spec.tensor_layout();
    let ok = expected.len() == names_shapes.len()
        && expected
            .iter()
            .zip(names_shapes)
            .all(|((n, s), (n2, s2))| n == n2 && s.as_slice() == *s2);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(
            "weights do not match the network spec layout".into(),
        ))
    }
}

impl<T: Real> NetParams<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Named index ranges of every parameter group, in layout order.
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (i, o) in self.offsets.iter().enumerate() {
            out.push((format!("layer{i}.g"), o.g..o.v));
            out.push((format!("layer{i}.v"), o.v..o.bias));
            out.push((format!("layer{i}.bias"), o.bias..o.bias + o.filters));
            if self.mode == ParamMode::Variational {
                out.push((format!("layer{i}.rho_w"), o.rho_w..o.rho_b));
                out.push((format!("layer{i}.rho_b"), o.rho_b..o.rho_b + o.filters));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            spec: self.spec.clone(),
            mode: self.mode,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            offsets: self.offsets.clone(),
        }
    }

    fn from_means(
        spec: &NetworkSpec,
        mode: ParamMode,
        means: &[&[f32]],
        sigmas: Option<&[&[f32]]>,
    ) -> Result<Self> {
        spec.validate()?;
        let (offsets, len) = layout(spec, mode);
        let mut data = vec![T::default(); len];
        for (i, o) in offsets.iter().enumerate() {
            let w = means[2 * i];
            let b = means[2 * i + 1];
            for f in 0..o.filters {
                let block = &w[f * o.per_filter..(f + 1) * o.per_filter];
                let norm = block
                    .iter()
                    .map(|x| (*x as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let vr = o.v + f * o.per_filter..o.v + (f + 1) * o.per_filter;
                if norm > 0.0 {
                    data[o.g + f] = T::from_f64(norm);
                    for (d, x) in data[vr].iter_mut().zip(block) {
                        *d = T::from_f64(*x as f64);
                    }
                } else {
                    // Zero filter: any direction with g = 0 reproduces it.
                    let unit = T::from_f64(1.0 / (o.per_filter as f64).sqrt());
                    data[vr].iter_mut().for_each(|d| *d = unit);
                    data[o.g + f] = T::default();
                }
            }
            for f in 0..o.filters {
                data[o.bias + f] = T::from_f64(b[f] as f64);
            }
            if let Some(sig) = sigmas {
                for (k, s) in sig[2 * i].iter().enumerate() {
                    data[o.rho_w + k] = T::from_f64(softplus_inverse(*s as f64));
                }
                for (k, s) in sig[2 * i + 1].iter().enumerate() {
                    data[o.rho_b + k] = T::from_f64(softplus_inverse(*s as f64));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            mode,
            data,
            offsets,
        })
    }

    /// MAP parameters reproducing `weights` (`g = ‖w_f‖`, `v = w_f`).
    pub fn map_from_weights(spec: &NetworkSpec, weights: &WeightSet) -> Result<Self> {
        let ns: Vec<(&str, &[usize])> = weights
            .arrays
            .iter()
            .map(|a| (a.name.as_str(), a.shape.as_slice()))
            .collect();
        check_layout(spec, &ns)?;
        let means: Vec<&[f32]> = weights.arrays.iter().map(|a| a.data.as_slice()).collect();
        Self::from_means(spec, ParamMode::Map, &means, None)
    }

    /// Variational parameters reproducing a posterior's means and sigmas.
    pub fn variational_from_posterior(spec: &NetworkSpec, q: &FfgPosterior) -> Result<Self> {
        q.check_positive()?;
        let ns: Vec<(&str, &[usize])> = q
            .tensors()
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        check_layout(spec, &ns)?;
        let means: Vec<&[f32]> = q.tensors().iter().map(|t| t.mu.as_slice()).collect();
        let sigmas: Vec<&[f32]> = q.tensors().iter().map(|t| t.sigma.as_slice()).collect();
        Self::from_means(spec, ParamMode::Variational, &means, Some(&sigmas))
    }

    /// Variational parameters with means at `weights` and a constant sigma.
    pub fn variational_from_weights(
        spec: &NetworkSpec,
        weights: &WeightSet,
        sigma: f32,
    ) -> Result<Self> {
        Self::variational_from_posterior(spec, &FfgPosterior::from_point(weights, sigma)?)
    }

    fn derive(&self) -> Derived<T> {
        let mut layers = Vec::with_capacity(self.offsets.len());
        for o in &self.offsets {
            let mut mean_w = vec![T::default(); o.filters * o.per_filter];
            for f in 0..o.filters {
                let v = &self.data[o.v + f * o.per_filter..o.v + (f + 1) * o.per_filter];
                let norm = v.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
                let scale = if norm > 0.0 {
                    self.data[o.g + f].to_f64() / norm
                } else {
                    0.0
                };
                for (m, x) in mean_w[f * o.per_filter..(f + 1) * o.per_filter]
                    .iter_mut()
                    .zip(v)
                {
                    *m = T::from_f64(scale * x.to_f64());
                }
            }
            let mean_b = self.data[o.bias..o.bias + o.filters].to_vec();
            let (var_w, var_b) = match self.mode {
                ParamMode::Map => (None, None),
                ParamMode::Variational => {
                    let sq = |r: &T| T::from_f64(softplus(r.to_f64()).powi(2));
                    (
                        Some(self.data[o.rho_w..o.rho_b].iter().map(sq).collect()),
                        Some(
                            self.data[o.rho_b..o.rho_b + o.filters]
                                .iter()
                                .map(sq)
                                .collect(),
                        ),
                    )
                }
            };
            layers.push(DerivedLayer {
                mean_w,
                mean_b,
                var_w,
                var_b,
            });
        }
        Derived { layers }
    }

    fn sigma_at(&self, index: usize) -> f64 {
        softplus(self.data[index].to_f64())
    }
}

impl NetParams<f32> {
    /// Effective weights (means for variational networks).
    pub fn weights(&self) -> WeightSet {
        let d = self.derive();
        let mut arrays = Vec::new();
        for (i, l) in d.layers.into_iter().enumerate() {
            arrays.push(NamedArray {
                name: format!("layer{i}.weight"),
                shape: self.spec.weight_shape(i),
                data: l.mean_w,
            });
            arrays.push(NamedArray {
                name: format!("layer{i}.bias"),
                shape: vec![self.spec.layers[i].filters],
                data: l.mean_b,
            });
        }
        WeightSet { arrays }
    }

    pub fn posterior(&self) -> Result<FfgPosterior> {
        if self.mode != ParamMode::Variational {
            return Err(Error::InvalidInput(
                "MAP parameters have no posterior sigmas".into(),
            ));
        }
        let means = self.weights();
        let mut tensors = Vec::new();
        for (o, pair) in self.offsets.iter().zip(means.arrays.chunks(2)) {
            let sw = (o.rho_w..o.rho_b)
                .map(|k| self.sigma_at(k) as f32)
                .collect();
            let sb = (o.rho_b..o.rho_b + o.filters)
                .map(|k| self.sigma_at(k) as f32)
                .collect();
            tensors.push(FfgTensor {
                name: pair[0].name.clone(),
                shape: pair[0].shape.clone(),
                mu: pair[0].data.clone(),
                sigma: sw,
            });
            tensors.push(FfgTensor {
                name: pair[1].name.clone(),
                shape: pair[1].shape.clone(),
                mu: pair[1].data.clone(),
                sigma: sb,
            });
        }
        FfgPosterior::new(tensors)
    }
}

#[derive(Debug, Clone)]
struct DerivedLayer<T> {
    mean_w: Vec<T>,
    mean_b: Vec<T>,
    var_w: Option<Vec<T>>,
    var_b: Option<Vec<T>>,
}

/// Per-layer effective means (and variances) used by the passes.
#[derive(Debug, Clone)]
struct Derived<T> {
    layers: Vec<DerivedLayer<T>>,
}

impl Derived<f32> {
    fn from_weights(spec: &NetworkSpec, weights: &WeightSet) -> Result<Self> {
        let ns: Vec<(&str, &[usize])> = weights
            .arrays
            .iter()
            .map(|a| (a.name.as_str(), a.shape.as_slice()))
            .collect();
        check_layout(spec, &ns)?;
        Ok(Self {
            layers: weights
                .arrays
                .chunks(2)
                .map(|p| DerivedLayer {
                    mean_w: p[0].data.clone(),
                    mean_b: p[1].data.clone(),
                    var_w: None,
                    var_b: None,
                })
                .collect(),
        })
    }

    fn from_posterior(spec: &NetworkSpec, q: &FfgPosterior) -> Result<Self> {
        let ns: Vec<(&str, &[usize])> = q
            .tensors()
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        check_layout(spec, &ns)?;
        let sq = |s: &[f32]| s.iter().map(|x| x * x).collect::<Vec<f32>>();
        Ok(Self {
            layers: q
                .tensors()
                .chunks(2)
                .map(|p| DerivedLayer {
                    mean_w: p[0].mu.clone(),
                    mean_b: p[1].mu.clone(),
                    var_w: Some(sq(&p[0].sigma)),
                    var_b: Some(sq(&p[1].sigma)),
                })
                .collect(),
        })
    }
}

/// Gradients with respect to the effective per-layer quantities.
#[derive(Debug, Clone)]
struct EffectiveGrads {
    layers: Vec<EffectiveLayerGrads>,
}

#[derive(Debug, Clone)]
struct EffectiveLayerGrads {
    mean_w: Vec<f64>,
    mean_b: Vec<f64>,
    var_w: Option<Vec<f64>>,
    var_b: Option<Vec<f64>>,
}

impl EffectiveGrads {
    fn add_assign(&mut self, other: &EffectiveGrads) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add(&mut a.mean_w, &b.mean_w);
            add(&mut a.mean_b, &b.mean_b);
            if let (Some(x), Some(y)) = (a.var_w.as_mut(), b.var_w.as_ref()) {
                add(x, y);
            }
            if let (Some(x), Some(y)) = (a.var_b.as_mut(), b.var_b.as_ref()) {
                add(x, y);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.mean_w.iter_mut().for_each(|x| *x *= s);
            l.mean_b.iter_mut().for_each(|x| *x *= s);
            if let Some(v) = l.var_w.as_mut() {
                v.iter_mut().for_each(|x| *x *= s);
            }
            if let Some(v) = l.var_b.as_mut() {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

struct LayerTrace<T> {
    input: Vec<T>,
    pre: Vec<T>,
    std: Option<Vec<T>>,
    eps: Option<Vec<T>>,
}

fn layer_noise<T: Real>(noise: Noise, layer: usize, example: usize, n: usize) -> Option<Vec<T>> {
    match noise {
        Noise::Zero => None,
        Noise::Seeded { seed, draw } => {
            let mut rng = noise_rng(seed, layer as u32, draw.wrapping_add(example as u32));
            let mut buf = vec![0f32; n];
            fill_standard_normal(&mut rng, &mut buf);
            Some(buf.into_iter().map(|e| T::from_f64(e as f64)).collect())
        }
    }
}

/// Forward pass of one example. Returns the logits and (optionally) the
/// per-layer trace needed for the backward pass.
fn forward_example<T: Real>(
    spec: &NetworkSpec,
    derived: &Derived<T>,
    input: &[T],
    dims: Dims,
    noise: Noise,
    example: usize,
    keep_trace: bool,
) -> (Vec<T>, Vec<LayerTrace<T>>) {
    let n = voxel_count(dims);
    let mut h = input.to_vec();
    let mut traces = Vec::new();
    let last = spec.layers.len() - 1;
    for (i, (l, d)) in spec.layers.iter().zip(&derived.layers).enumerate() {
        let shape = l.kernel();
        let cin = spec.in_channels(i);
        let mut pre = conv_forward_raw(
            &h,
            cin,
            dims,
            &d.mean_w,
            Some(&d.mean_b),
            l.filters,
            &shape,
            dims,
        );
        let mut std = None;
        let mut eps_kept = None;
        if let (Some(vw), Some(vb)) = (&d.var_w, &d.var_b) {
            let sq: Vec<T> = h.iter().map(|x| T::from_f64(x.to_f64().powi(2))).collect();
            let var = conv_forward_raw(&sq, cin, dims, vw, Some(vb), l.filters, &shape, dims);
            let s: Vec<T> = var
                .iter()
                .map(|v| T::from_f64(v.to_f64().max(0.0).sqrt()))
                .collect();
            if let Some(eps) = layer_noise::<T>(noise, i, example, l.filters * n) {
                for ((p, s), e) in pre.iter_mut().zip(&s).zip(&eps) {
                    *p = T::from_f64(p.to_f64() + s.to_f64() * e.to_f64());
                }
                eps_kept = Some(eps);
            }
            std = Some(s);
        }
        let out = if i < last {
            pre.iter()
                .map(|v| if v.to_f64() > 0.0 { *v } else { T::default() })
                .collect()
        } else {
            pre.clone()
        };
        if keep_trace {
            traces.push(LayerTrace {
                input: std::mem::take(&mut h),
                pre,
                std,
                eps: eps_kept,
            });
        }
        h = out;
    }
    (h, traces)
}

/// Sum over voxels of `−log softmax(logits)[label]`, plus `softmax − onehot`
/// when requested.
fn nll_from_logits<T: Real>(
    logits: &[T],
    classes: usize,
    labels: &[u32],
    want_grad: bool,
) -> (f64, Option<Vec<T>>) {
    let n = labels.len();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![T::default(); logits.len()]);
    let mut buf = vec![0f64; classes];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (c, b) in buf.iter_mut().enumerate() {
            *b = logits[c * n + v].to_f64();
            max = max.max(*b);
        }
        let sum: f64 = buf.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[v] as usize;
        total += lse - buf[y];
        if let Some(g) = grad.as_mut() {
            for c in 0..classes {
                let p = (buf[c] - lse).exp();
                g[c * n + v] = T::from_f64(if c == y { p - 1.0 } else { p });
            }
        }
    }
    (total, grad)
}

fn backward_example<T: Real>(
    spec: &NetworkSpec,
    derived: &Derived<T>,
    traces: &[LayerTrace<T>],
    dims: Dims,
    grad_logits: Vec<T>,
) -> EffectiveGrads {
    let n = voxel_count(dims);
    let mut grads: Vec<Option<EffectiveLayerGrads>> = vec![None; spec.layers.len()];
    let mut dz = grad_logits;
    for i in (0..spec.layers.len()).rev() {
        let l = &spec.layers[i];
        let d = &derived.layers[i];
        let t = &traces[i];
        let shape = l.kernel();
        let cin = spec.in_channels(i);
        let f = l.filters;
        let channel_sums = |g: &[T]| -> Vec<f64> {
            (0..f)
                .map(|k| g[k * n..(k + 1) * n].iter().map(|x| x.to_f64()).sum())
                .collect()
        };
        let mean_w = conv_backward_weights(&dz, dims, &t.input, cin, dims, f, &shape);
        let mean_b = channel_sums(&dz);
        let mut var_w = None;
        let mut var_b = None;
        let mut dvar: Option<Vec<T>> = None;
        if let (Some(std), Some(_)) = (&t.std, &d.var_w) {
            let dv: Vec<T> = match &t.eps {
                Some(eps) => dz
                    .iter()
                    .zip(eps)
                    .zip(std)
                    .map(|((g, e), s)| {
                        let s = s.to_f64();
                        T::from_f64(if s > 0.0 {
                            g.to_f64() * e.to_f64() / (2.0 * s)
                        } else {
                            0.0
                        })
                    })
                    .collect(),
                None => vec![T::default(); dz.len()],
            };
            let sq: Vec<T> = t
                .input
                .iter()
                .map(|x| T::from_f64(x.to_f64().powi(2)))
                .collect();
            var_w = Some(conv_backward_weights(&dv, dims, &sq, cin, dims, f, &shape));
            var_b = Some(channel_sums(&dv));
            dvar = Some(dv);
        }
        grads[i] = Some(EffectiveLayerGrads {
            mean_w,
            mean_b,
            var_w,
            var_b,
        });
        if i == 0 {
            break;
        }
        let mut dh = conv_backward_input(&dz, dims, &d.mean_w, f, cin, dims, &shape);
        if let (Some(dv), Some(vw)) = (&dvar, &d.var_w) {
            let through_var = conv_backward_input(dv, dims, vw, f, cin, dims, &shape);
            for ((g, x), tv) in dh.iter_mut().zip(&t.input).zip(&through_var) {
                *g = T::from_f64(g.to_f64() + 2.0 * x.to_f64() * tv.to_f64());
            }
        }
        // ReLU of the previous layer.
        let prev = &traces[i - 1].pre;
        for (g, z) in dh.iter_mut().zip(prev) {
            if z.to_f64() <= 0.0 {
                *g = T::default();
            }
        }
        dz = dh;
    }
    EffectiveGrads {
        layers: grads.into_iter().map(Option::unwrap).collect(),
    }
}

fn check_batch(spec: &NetworkSpec, batch: &[&Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for ex in batch {
        if ex.input.channels() != spec.input_channels {
            return Err(Error::Shape(format!(
                "example has {} channels, network expects {}",
                ex.input.channels(),
                spec.input_channels
            )));
        }
        if let Some(bad) = ex.labels.iter().find(|&&y| y as usize >= spec.classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside [0, {})",
                spec.classes
            )));
        }
    }
    Ok(())
}

/// Data term and its gradient over a batch, scaled by `N/M`.
fn data_pass<T: Real>(
    spec: &NetworkSpec,
    derived: &Derived<T>,
    batch: &[&Example],
    n_scale: f64,
    noise: Noise,
    want_grad: bool,
) -> (f64, Option<EffectiveGrads>) {
    let results: Vec<(f64, Option<EffectiveGrads>)> = batch
        .par_iter()
        .enumerate()
        .map(|(m, ex)| {
            let input: Vec<T> = ex
                .input
                .data()
                .iter()
                .map(|x| T::from_f64(*x as f64))
                .collect();
            let dims = ex.input.dims();
            let (logits, traces) =
                forward_example(spec, derived, &input, dims, noise, m, want_grad);
            let (nll, glog) = nll_from_logits(&logits, spec.classes, &ex.labels, want_grad);
            let g = glog.map(|gl| backward_example(spec, derived, &traces, dims, gl));
            (nll, g)
        })
        .collect();
    let scale = n_scale / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Option<EffectiveGrads> = None;
    for (nll, g) in results {
        total += nll;
        if let Some(g) = g {
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
    }
    if let Some(g) = grads.as_mut() {
        g.scale(scale);
    }
    (total * scale, grads)
}

/// Objective (negated log joint or negated ELBO) and its gradient with respect
/// to every entry of `params`.
///
/// `n_scale` is the `N` of the `N/M` data-term factor.
pub fn objective_and_grad<T: Real>(
    params: &NetParams<T>,
    batch: &[&Example],
    prior: &GaussianPrior,
    n_scale: f64,
    noise: Noise,
    want_grad: bool,
) -> Result<(ObjectiveValue, Option<Vec<f64>>)> {
    let spec = &params.spec;
    check_batch(spec, batch)?;
    prior.validate()?;
    if let GaussianPrior::Posterior(p) = prior {
        let ns: Vec<(&str, &[usize])> = p
            .tensors()
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        check_layout(spec, &ns)?;
    }
    let derived = params.derive();
    let noise = match params.mode {
        ParamMode::Map => Noise::Zero,
        ParamMode::Variational => noise,
    };
    let (data_term, eff) = data_pass(spec, &derived, batch, n_scale, noise, want_grad);

    let mut kl_term = 0.0;
    let mut grad = want_grad.then(|| vec![0f64; params.len()]);
    let mut eff = eff;
    for (i, o) in params.offsets.iter().enumerate() {
        let d = &derived.layers[i];
        let ti_w = 2 * i;
        let ti_b = 2 * i + 1;
        // Prior / KL contributions on the effective means, plus KL on sigmas.
        let mut prior_mean_w = vec![0f64; d.mean_w.len()];
        let mut prior_mean_b = vec![0f64; d.mean_b.len()];
        let mut kl_sigma_w = vec![0f64; d.mean_w.len()];
        let mut kl_sigma_b = vec![0f64; d.mean_b.len()];
        for (k, m) in d.mean_w.iter().enumerate() {
            let (mp, sp) = prior.at(ti_w, k);
            let m = m.to_f64();
            match params.mode {
                ParamMode::Map => kl_term += (m - mp).powi(2) / (2.0 * sp * sp),
                ParamMode::Variational => {
                    let s = params.sigma_at(o.rho_w + k);
                    kl_term += kl_gaussian(m, s, mp, sp);
                    kl_sigma_w[k] = -1.0 / s + s / (sp * sp);
                }
            }
            prior_mean_w[k] = (m - mp) / (sp * sp);
        }
        for (k, m) in d.mean_b.iter().enumerate() {
            let (mp, sp) = prior.at(ti_b, k);
            let m = m.to_f64();
            match params.mode {
                ParamMode::Map => kl_term += (m - mp).powi(2) / (2.0 * sp * sp),
                ParamMode::Variational => {
                    let s = params.sigma_at(o.rho_b + k);
                    kl_term += kl_gaussian(m, s, mp, sp);
                    kl_sigma_b[k] = -1.0 / s + s / (sp * sp);
                }
            }
            prior_mean_b[k] = (m - mp) / (sp * sp);
        }
        let Some(grad) = grad.as_mut() else { continue };
        let e = &mut eff.as_mut().expect("gradients requested").layers[i];
        for (a, b) in e.mean_w.iter_mut().zip(&prior_mean_w) {
            *a += b;
        }
        for (a, b) in e.mean_b.iter_mut().zip(&prior_mean_b) {
            *a += b;
        }
        // Weight normalization.
        for f in 0..o.filters {
            let vr = o.v + f * o.per_filter..o.v + (f + 1) * o.per_filter;
            let v = &params.data[vr.clone()];
            let dmu = &e.mean_w[f * o.per_filter..(f + 1) * o.per_filter];
            let norm = v.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let dg: f64 = v.iter().zip(dmu).map(|(x, d)| x.to_f64() * d).sum::<f64>() / norm;
            grad[o.g + f] = dg;
            let scale = params.data[o.g + f].to_f64() / norm;
            for ((gv, x), d) in grad[vr].iter_mut().zip(v).zip(dmu) {
                *gv = scale * (d - dg * x.to_f64() / norm);
            }
        }
        grad[o.bias..o.bias + o.filters].copy_from_slice(&e.mean_b);
        if params.mode == ParamMode::Variational {
            let vw = e.var_w.as_ref().expect("variational gradients");
            let vb = e.var_b.as_ref().expect("variational gradients");
            for k in 0..vw.len() {
                let rho = params.data[o.rho_w + k].to_f64();
                let s = softplus(rho);
                grad[o.rho_w + k] = (vw[k] * 2.0 * s + kl_sigma_w[k]) * softplus_grad(rho);
            }
            for k in 0..vb.len() {
                let rho = params.data[o.rho_b + k].to_f64();
                let s = softplus(rho);
                grad[o.rho_b + k] = (vb[k] * 2.0 * s + kl_sigma_b[k]) * softplus_grad(rho);
            }
        }
    }
    Ok((
        ObjectiveValue {
            data_term,
            kl_term,
            total: data_term + kl_term,
        },
        grad,
    ))
}

/// Sign pattern of every hidden pre-activation over the batch, in batch,
/// layer, channel, voxel order. Finite-difference checks use it to detect
/// perturbations that cross a ReLU kink.
pub fn relu_pattern<T: Real>(
    params: &NetParams<T>,
    batch: &[&Example],
    noise: Noise,
) -> Result<Vec<bool>> {
    let spec = &params.spec;
    check_batch(spec, batch)?;
    let derived = params.derive();
    let noise = match params.mode {
        ParamMode::Map => Noise::Zero,
        ParamMode::Variational => noise,
    };
    let last = spec.layers.len() - 1;
    let mut out = Vec::new();
    for (m, ex) in batch.iter().enumerate() {
        let input: Vec<T> = ex
            .input
            .data()
            .iter()
            .map(|x| T::from_f64(*x as f64))
            .collect();
        let (_, traces) = forward_example(spec, &derived, &input, ex.input.dims(), noise, m, true);
        for t in &traces[..last] {
            out.extend(t.pre.iter().map(|v| v.to_f64() > 0.0));
        }
    }
    Ok(out)
}

/// Deterministic class probabilities for one input.
pub fn forward_map(
    spec: &NetworkSpec,
    weights: &WeightSet,
    input: &FeatureMap,
) -> Result<FeatureMap> {
    if input.channels() != spec.input_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, network expects {}",
            input.channels(),
            spec.input_channels
        )));
    }
    let derived = Derived::from_weights(spec, weights)?;
    let (logits, _) = forward_example(
        spec,
        &derived,
        input.data(),
        input.dims(),
        Noise::Zero,
        0,
        false,
    );
    let logits = FeatureMap::new(logits, spec.classes, input.dims())?;
    Ok(crate::tensor::softmax_channels(&logits))
}

/// Mean negative log-likelihood per voxel of `labels` under `probs`.
///
/// Zero probabilities at a true label give `+∞`; training paths evaluate the
/// loss from logits instead.
pub fn nll_loss(probs: &FeatureMap, labels: &[u32]) -> Result<f64> {
    let n = probs.voxels();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} voxels",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (v, &y) in labels.iter().enumerate() {
        if y as usize >= probs.channels() {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        total -= (probs.data()[y as usize * n + v] as f64).ln();
    }
    Ok(total / n as f64)
}

/// Mean negative log-likelihood per voxel computed from logits (log-sum-exp).
pub fn nll_from_logit_map(logits: &FeatureMap, labels: &[u32]) -> Result<f64> {
    if labels.len() != logits.voxels() {
        return Err(Error::Shape("label count differs from voxel count".into()));
    }
    let (sum, _) = nll_from_logits(logits.data(), logits.channels(), labels, false);
    Ok(sum / labels.len() as f64)
}

/// `−[(N/M)·Σ_m log p(y_m|x_m, w) + log p(w)]` with the prior's constant dropped.
pub fn map_objective(
    spec: &NetworkSpec,
    weights: &WeightSet,
    batch: &[&Example],
    prior: &GaussianPrior,
    n_scale: f64,
) -> Result<ObjectiveValue> {
    check_batch(spec, batch)?;
    prior.validate()?;
    let derived = Derived::from_weights(spec, weights)?;
    let (data_term, _) = data_pass(spec, &derived, batch, n_scale, Noise::Zero, false);
    let mut penalty = 0.0;
    for (ti, a) in weights.arrays.iter().enumerate() {
        for (k, w) in a.data.iter().enumerate() {
            let (mp, sp) = prior.at(ti, k);
            penalty += (*w as f64 - mp).powi(2) / (2.0 * sp * sp);
        }
    }
    Ok(ObjectiveValue {
        data_term,
        kl_term: penalty,
        total: data_term + penalty,
    })
}

/// Negated single-sample ELBO with locally reparameterized layers.
pub fn elbo_objective(
    spec: &NetworkSpec,
    q: &FfgPosterior,
    batch: &[&Example],
    prior: &GaussianPrior,
    n_scale: f64,
    noise: Noise,
) -> Result<ObjectiveValue> {
    check_batch(spec, batch)?;
    let derived = Derived::from_posterior(spec, q)?;
    let (data_term, _) = data_pass(spec, &derived, batch, n_scale, noise, false);
    let kl_term = crate::variational::kl_ffg(q, prior)?;
    Ok(ObjectiveValue {
        data_term,
        kl_term,
        total: data_term + kl_term,
    })
}
