use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Volume};
use crate::variational::{mix_seed, noise_rng};

const GEOMETRY_STREAM: u32 = 0x6E0;
const SITE_STREAM: u32 = 0x5173;

/// Acquisition characteristics of one synthetic site.
///
/// A clean phantom intensity `x ∈ (0, 1]` becomes
/// `gain · x^gamma · (1 + bias_field · f(v)) + bias + noise_sigma · ε`, where
/// `f` is a smooth field with site-random phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteProfile {
    pub id: String,
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub bias_field: f64,
    /// Volumes generated for the site, train and test together.
    pub volumes: usize,
    pub seed: u64,
}

impl SiteProfile {
    pub fn new(id: &str, volumes: usize, seed: u64) -> Self {
        Self {
            id: id.to_string(),
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            bias_field: 0.0,
            volumes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("site `{}`: {m}", self.id)));
        if !valid_id(&self.id) {
            return fail("ids use letters, digits, `_` or `-`".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            ));
        }
        if !(self.gain.is_finite() && self.gain != 0.0 && self.bias.is_finite()) {
            return fail("gain must be finite and non-zero, bias finite".into());
        }
        if !(self.bias_field.is_finite() && self.bias_field.abs() < 1.0) {
            return fail(format!(
                "bias field amplitude must lie in (-1, 1), got {}",
                self.bias_field
            ));
        }
        if self.volumes == 0 {
            return fail("needs at least one volume".into());
        }
        Ok(())
    }
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Shape of the nested-ellipsoid phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Cubic volume side in voxels.
    pub side: usize,
    /// Classes including background; regions `1..classes` are nested.
    pub classes: usize,
    /// Half-width of each class's uniform intensity band.
    pub band_halfwidth: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            side: 24,
            classes: 5,
            band_halfwidth: 0.06,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || self.classes < 2 {
            return Err(Error::Config(
                "phantoms need side >= 8 and at least two classes".into(),
            ));
        }
        if !(self.band_halfwidth >= 0.0 && self.band_halfwidth < 0.5) {
            return Err(Error::Config("band half-width must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        [self.side; 3]
    }

    /// Centre of class `c`'s intensity band; bands are evenly spaced.
    pub fn class_mean(&self, c: usize) -> f64 {
        0.15 + 0.7 * c as f64 / (self.classes - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub image: Volume,
    /// Class index per voxel, stored as reals.
    pub labels: Volume,
}

impl LabeledVolume {
    pub fn label_indices(&self) -> Vec<u32> {
        self.labels.data().iter().map(|&v| v as u32).collect()
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.centre[i]) / self.axes[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn nested_ellipsoids<R: Rng>(rng: &mut R, side: f64, count: usize) -> Vec<Ellipsoid> {
    let mut out: Vec<Ellipsoid> = Vec::with_capacity(count);
    for _ in 0..count {
        let e = match out.last() {
            None => Ellipsoid {
                centre: [0; 3].map(|_| side / 2.0 + rng.random_range(-0.08..0.08) * side),
                axes: [0; 3].map(|_| rng.random_range(0.40..0.46) * side),
            },
            Some(parent) => {
                let axes = parent.axes.map(|a| a * rng.random_range(0.76..0.84));
                let mut centre = parent.centre;
                for i in 0..3 {
                    let slack = 0.3 * (parent.axes[i] - axes[i]);
                    centre[i] += rng.random_range(-slack..=slack);
                }
                Ellipsoid { centre, axes }
            }
        };
        out.push(e);
    }
    out
}

fn site_seed(profile: &SiteProfile) -> u64 {
    // FNV-1a over the id keeps regeneration a function of (seed, id).
    let h = profile.id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    mix_seed(profile.seed, h)
}

/// Volume `index` of a site. Geometry and tissue texture depend only on
/// `(geometry_seed, index)`; the site profile adds its intensity transform,
/// bias field and noise.
pub fn generate_volume(
    profile: &SiteProfile,
    phantom: &PhantomConfig,
    geometry_seed: u64,
    index: usize,
) -> Result<LabeledVolume> {
    profile.validate()?;
    phantom.validate()?;
    let side = phantom.side;
    let n = side * side * side;
    let mut geo = noise_rng(mix_seed(geometry_seed, index as u64), GEOMETRY_STREAM, 0);
    let regions = nested_ellipsoids(&mut geo, side as f64, phantom.classes - 1);
    let mut site = noise_rng(mix_seed(site_seed(profile), index as u64), SITE_STREAM, 0);
    let phase: [f64; 3] = [0; 3].map(|_| site.random_range(0.0..TAU));
    let freq: [f64; 3] = [0; 3].map(|_| site.random_range(0.5..1.5));

    let mut image = vec![0f32; n];
    let mut labels = vec![0f32; n];
    let mut eps = vec![0f32; n];
    crate::variational::fill_standard_normal(&mut site, &mut eps);
    let bw = phantom.band_halfwidth;
    let mut v = 0;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let class = regions.iter().take_while(|e| e.contains(p)).count();
                let texture = if bw > 0.0 {
                    geo.random_range(-bw..bw)
                } else {
                    0.0
                };
                let clean = (phantom.class_mean(class) + texture).clamp(0.01, 1.0);
                let field = (0..3)
                    .map(|i| (TAU * freq[i] * p[i] / side as f64 + phase[i]).sin())
                    .sum::<f64>()
                    / 3.0;
                let value =
                    profile.gain * clean.powf(profile.gamma) * (1.0 + profile.bias_field * field)
                        + profile.bias
                        + profile.noise_sigma * eps[v] as f64;
                image[v] = value as f32;
                labels[v] = class as f32;
                v += 1;
            }
        }
    }
    Ok(LabeledVolume {
        image: Volume::new(image, phantom.dims())?,
        labels: Volume::new(labels, phantom.dims())?,
    })
}

/// All `profile.volumes` volumes of a site.
pub fn generate_site(
    profile: &SiteProfile,
    phantom: &PhantomConfig,
    geometry_seed: u64,
) -> Result<Vec<LabeledVolume>> {
    (0..profile.volumes)
        .map(|i| generate_volume(profile, phantom, geometry_seed, i))
        .collect()
}
