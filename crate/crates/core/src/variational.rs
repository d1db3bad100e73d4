//! Fully factorized Gaussian weight posteriors.
//!
//! Every weight (biases included) carries its own mean and standard
//! deviation. Convolutions against such a posterior are evaluated with the
//! local reparameterization: the mean map is the convolution of the input with
//! the weight means, the variance map is the convolution of the squared input
//! with the weight variances plus the bias variance, and the output is
//! `mean + sqrt(var) · ε` with one standard-normal draw per output voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{self, FeatureMap, KernelShape};

/// A named dense array of point values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "array `{name}` has {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Point weights for a whole network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub arrays: Vec<NamedArray>,
}

impl WeightSet {
    pub fn num_weights(&self) -> usize {
        self.arrays.iter().map(NamedArray::len).sum()
    }
}

/// Mean and standard deviation arrays for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FfgTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl FfgTensor {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Fully factorized Gaussian over every network weight.
#[derive(Debug, Clone, PartialEq)]
pub struct FfgPosterior {
    tensors: Vec<FfgTensor>,
}

impl FfgPosterior {
    /// Validates shapes, finiteness and `sigma > 0`.
    pub fn new(tensors: Vec<FfgTensor>) -> Result<Self> {
        Self::validate(&tensors, false)?;
        Ok(Self { tensors })
    }

    /// Point-mass posterior (`sigma = 0`) at the given weights. Only sampling
    /// and prediction accept it; KL and consolidation reject it.
    pub fn degenerate(weights: &WeightSet) -> Self {
        Self {
            tensors: weights
                .arrays
                .iter()
                .map(|a| FfgTensor {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    mu: a.data.clone(),
                    sigma: vec![0.0; a.len()],
                })
                .collect(),
        }
    }

    /// Attaches a constant standard deviation to point weights, turning a MAP
    /// estimate into a Gaussian prior or initialization.
    pub fn from_point(weights: &WeightSet, sigma: f32) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "constant sigma must be positive and finite, got {sigma}"
            )));
        }
        Self::new(
            weights
                .arrays
                .iter()
                .map(|a| FfgTensor {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    mu: a.data.clone(),
                    sigma: vec![sigma; a.len()],
                })
                .collect(),
        )
    }

    fn validate(tensors: &[FfgTensor], allow_zero: bool) -> Result<()> {
        for t in tensors {
            let n: usize = t.shape.iter().product();
            if t.mu.len() != n || t.sigma.len() != n {
                return Err(Error::Shape(format!(
                    "tensor `{}` has {} means and {} sigmas for shape {:?}",
                    t.name,
                    t.mu.len(),
                    t.sigma.len(),
                    t.shape
                )));
            }
            if let Some(i) = t.mu.iter().position(|m| !m.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite mean at index {i} of `{}`",
                    t.name
                )));
            }
            let bad = t
                .sigma
                .iter()
                .position(|&s| !s.is_finite() || s < 0.0 || (s == 0.0 && !allow_zero));
            if let Some(i) = bad {
                return Err(Error::InvalidInput(format!(
                    "sigma {} at index {i} of `{}` is not positive",
                    t.sigma[i], t.name
                )));
            }
        }
        Ok(())
    }

    /// Rejects zero sigmas left by [`FfgPosterior::degenerate`].
    pub fn check_positive(&self) -> Result<()> {
        Self::validate(&self.tensors, false)
    }

    pub fn tensors(&self) -> &[FfgTensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<FfgTensor> {
        self.tensors
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(FfgTensor::len).sum()
    }

    pub fn means(&self) -> WeightSet {
        WeightSet {
            arrays: self
                .tensors
                .iter()
                .map(|t| NamedArray {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.mu.clone(),
                })
                .collect(),
        }
    }

    /// True when both posteriors have the same tensor names and shapes.
    pub fn same_layout(&self, other: &FfgPosterior) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn layout_matches(&self, weights: &WeightSet) -> bool {
        self.tensors.len() == weights.arrays.len()
            && self
                .tensors
                .iter()
                .zip(&weights.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Prior over network weights: a broadcast scalar Gaussian or a full
/// per-weight posterior from an earlier round.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianPrior {
    Scalar { mu: f32, sigma: f32 },
    Posterior(FfgPosterior),
}

impl GaussianPrior {
    pub fn standard_normal() -> Self {
        GaussianPrior::Scalar {
            mu: 0.0,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GaussianPrior::Scalar { mu, sigma } => {
                if !(*sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "scalar prior N({mu}, {sigma}²) needs finite mean and positive sigma"
                    )));
                }
                Ok(())
            }
            GaussianPrior::Posterior(p) => p.check_positive(),
        }
    }

    /// Prior `(mean, sigma)` for weight `index` of tensor `tensor`.
    #[inline]
    pub fn at(&self, tensor: usize, index: usize) -> (f64, f64) {
        match self {
            GaussianPrior::Scalar { mu, sigma } => (*mu as f64, *sigma as f64),
            GaussianPrior::Posterior(p) => {
                let t = &p.tensors[tensor];
                (t.mu[index] as f64, t.sigma[index] as f64)
            }
        }
    }

    fn check_layout(&self, shapes: &[(&str, &[usize])]) -> Result<()> {
        if let GaussianPrior::Posterior(p) = self {
            let ok = p.tensors.len() == shapes.len()
                && p.tensors
                    .iter()
                    .zip(shapes)
                    .all(|(t, (_, s))| t.shape.as_slice() == *s);
            if !ok {
                return Err(Error::Shape(
                    "prior posterior layout differs from the variational posterior".into(),
                ));
            }
        }
        Ok(())
    }
}

/// KL divergence of one Gaussian from another, in nats.
#[inline]
pub fn kl_gaussian(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let d = mu_q - mu_p;
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// `KL(q ‖ p)` summed over every weight.
pub fn kl_ffg(q: &FfgPosterior, prior: &GaussianPrior) -> Result<f64> {
    q.check_positive()?;
    prior.validate()?;
    let shapes: Vec<(&str, &[usize])> = q
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    prior.check_layout(&shapes)?;
    let mut total = 0.0;
    for (ti, t) in q.tensors.iter().enumerate() {
        for i in 0..t.len() {
            let (mp, sp) = prior.at(ti, i);
            total += kl_gaussian(t.mu[i] as f64, t.sigma[i] as f64, mp, sp);
        }
    }
    Ok(total)
}

/// Derives an independent 64-bit seed from a parent seed and an index
/// (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based standard-normal stream for `(seed, stream, draw)`.
///
/// Streams for different `(stream, draw)` pairs are independent, so any
/// evaluation order yields the same numbers.
pub fn noise_rng(seed: u64, stream: u32, draw: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | draw as u64);
    rng
}

pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out {
        *v = rng.sample::<f64, _>(StandardNormal) as f32;
    }
}

pub fn standard_normal_vec(seed: u64, stream: u32, draw: u32, n: usize) -> Vec<f32> {
    let mut rng = noise_rng(seed, stream, draw);
    let mut out = vec![0.0; n];
    fill_standard_normal(&mut rng, &mut out);
    out
}

/// Draws `w = μ + σ·ε` for every weight; tensor `i` uses stream `i`.
pub fn sample_weights(q: &FfgPosterior, seed: u64) -> WeightSet {
    WeightSet {
        arrays: q
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let eps = standard_normal_vec(seed, i as u32, 0, t.len());
                NamedArray {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .mu
                        .iter()
                        .zip(&t.sigma)
                        .zip(&eps)
                        .map(|((m, s), e)| m + s * e)
                        .collect(),
                }
            })
            .collect(),
    }
}

/// Weight-normalized means: `mu_f = g_f · v_f / ‖v_f‖₂` per filter.
pub fn weight_normalized_mean(g: &[f32], v: &[f32]) -> Result<Vec<f32>> {
    let filters = g.len();
    if filters == 0 || v.len() % filters != 0 {
        return Err(Error::Shape(format!(
            "direction array of {} entries cannot be split over {} filters",
            v.len(),
            filters
        )));
    }
    let per = v.len() / filters;
    let mut mu = vec![0f32; v.len()];
    for f in 0..filters {
        let block = &v[f * per..(f + 1) * per];
        let norm = l2_norm(block);
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "filter {f} has a zero-norm direction"
            )));
        }
        let scale = g[f] as f64 / norm;
        for (m, x) in mu[f * per..(f + 1) * per].iter_mut().zip(block) {
            *m = (scale * *x as f64) as f32;
        }
    }
    Ok(mu)
}

/// Chain rule through weight normalization. Returns `(dL/dg, dL/dv)` given
/// `dL/dmu`.
pub fn weight_norm_backward(g: &[f32], v: &[f32], grad_mu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let filters = g.len();
    let per = v.len() / filters;
    let mut grad_g = vec![0f64; filters];
    let mut grad_v = vec![0f64; v.len()];
    for f in 0..filters {
        let block = &v[f * per..(f + 1) * per];
        let dmu = &grad_mu[f * per..(f + 1) * per];
        let norm = l2_norm(block);
        let dg: f64 = block
            .iter()
            .zip(dmu)
            .map(|(x, d)| *x as f64 * d)
            .sum::<f64>()
            / norm;
        grad_g[f] = dg;
        let scale = g[f] as f64 / norm;
        for ((gv, x), d) in grad_v[f * per..(f + 1) * per]
            .iter_mut()
            .zip(block)
            .zip(dmu)
        {
            *gv = scale * (d - dg * *x as f64 / norm);
        }
    }
    (grad_g, grad_v)
}

fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of softplus (the logistic function).
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One convolutional layer of an FFG posterior.
#[derive(Debug, Clone, Copy)]
pub struct FfgLayer<'a> {
    pub weight: &'a FfgTensor,
    pub bias: &'a FfgTensor,
}

/// Mean map, variance map and the sampled output of a stochastic convolution.
#[derive(Debug, Clone)]
pub struct FfgConvOutput {
    pub output: FeatureMap,
    pub mean: FeatureMap,
    pub variance: FeatureMap,
    /// Voxels whose computed variance came out negative and was set to zero.
    pub clamped_variances: usize,
}

/// Stochastic dilated convolution with the noise moved onto the activations.
///
/// `noise` holds one standard-normal draw per output filter and voxel.
pub fn ffg_conv3d(
    input: &FeatureMap,
    layer: FfgLayer<'_>,
    shape: &KernelShape,
    noise: &FeatureMap,
) -> Result<FfgConvOutput> {
    let filters = layer.bias.len();
    let mean = tensor::dilated_conv3d(input, &layer.weight.mu, &layer.bias.mu, shape)?;
    if noise.channels() != filters || noise.dims() != mean.dims() {
        return Err(Error::Shape(format!(
            "noise shaped {}×{:?}, layer output is {}×{:?}",
            noise.channels(),
            noise.dims(),
            filters,
            mean.dims()
        )));
    }
    let squared = FeatureMap::new(
        input.data().iter().map(|h| h * h).collect(),
        input.channels(),
        input.dims(),
    )?;
    let w_var: Vec<f32> = layer.weight.sigma.iter().map(|s| s * s).collect();
    let b_var: Vec<f32> = layer.bias.sigma.iter().map(|s| s * s).collect();
    let mut variance = tensor::dilated_conv3d(&squared, &w_var, &b_var, shape)?;
    let mut clamped = 0;
    for v in variance.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    let out: Vec<f32> = mean
        .data()
        .iter()
        .zip(variance.data())
        .zip(noise.data())
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Ok(FfgConvOutput {
        output: FeatureMap::new(out, filters, mean.dims())?,
        mean,
        variance,
        clamped_variances: clamped,
    })
}
