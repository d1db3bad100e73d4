//! Closed-form consolidation of site posteriors and the checkpoint format
//! sites exchange.
//!
//! Given a shared prior `N(μ₀, σ₀²)` and `S` site posteriors `N(μₛ, σₛ²)`
//! trained from it, the consolidated posterior per weight is Gaussian with
//!
//! ```text
//! τ   = Σₛ 1/σₛ² − (S−1)/σ₀²
//! σ²  = 1/τ
//! μ   = (Σₛ μₛ/σₛ² − (S−1)·μ₀/σ₀²) · σ²
//! ```
//!
//! `τ > 0` is guaranteed by first shrinking every site variance to at most
//! the prior variance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util;
use crate::meshnet::NetworkSpec;
use crate::variational::{FfgPosterior, FfgTensor, NamedArray, WeightSet};

/// Result of consolidating site posteriors against their common prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedPosterior {
    pub posterior: FfgPosterior,
    pub prior_provenance: Vec<String>,
    pub site_provenance: Vec<Vec<String>>,
    /// Site weights whose variance exceeded the prior's and was shrunk.
    pub clamp_count: usize,
}

/// Shrinks site variances to at most the prior variance, elementwise.
pub fn clamp_site_variances(
    prior: &FfgPosterior,
    site: &FfgPosterior,
) -> Result<(FfgPosterior, usize)> {
    if !prior.same_layout(site) {
        return Err(Error::Shape(
            "site posterior layout differs from the prior".into(),
        ));
    }
    let mut count = 0;
    let tensors = site
        .tensors()
        .iter()
        .zip(prior.tensors())
        .map(|(s, p)| {
            let sigma = s
                .sigma
                .iter()
                .zip(&p.sigma)
                .map(|(&ss, &ps)| {
                    if ss > ps {
                        count += 1;
                        ps
                    } else {
                        ss
                    }
                })
                .collect();
            FfgTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                mu: s.mu.clone(),
                sigma,
            }
        })
        .collect();
    Ok((FfgPosterior::new(tensors)?, count))
}

/// Sums in ascending order so the result does not depend on input order.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Consolidates `sites` against `prior`; see the module docs for the update.
pub fn consolidate(prior: &FfgPosterior, sites: &[FfgPosterior]) -> Result<ConsolidatedPosterior> {
    if sites.is_empty() {
        return Err(Error::InvalidInput(
            "consolidation needs at least one site posterior".into(),
        ));
    }
    prior.check_positive()?;
    let mut clamp_count = 0;
    let mut clamped = Vec::with_capacity(sites.len());
    for site in sites {
        site.check_positive()?;
        let (c, n) = clamp_site_variances(prior, site)?;
        clamp_count += n;
        clamped.push(c);
    }
    let extra = (sites.len() - 1) as f64;
    let mut precisions = vec![0f64; sites.len()];
    let mut weighted = vec![0f64; sites.len()];
    let mut tensors = Vec::with_capacity(prior.tensors().len());
    for (ti, p) in prior.tensors().iter().enumerate() {
        let mut mu = Vec::with_capacity(p.len());
        let mut sigma = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            for (s, site) in clamped.iter().enumerate() {
                let t = &site.tensors()[ti];
                let var = (t.sigma[i] as f64).powi(2);
                precisions[s] = 1.0 / var;
                weighted[s] = t.mu[i] as f64 / var;
            }
            let prior_var = (p.sigma[i] as f64).powi(2);
            let precision = ordered_sum(&mut precisions) - extra / prior_var;
            if !(precision > 0.0) {
                return Err(Error::NonPositivePrecision {
                    tensor: p.name.clone(),
                    index: i,
                    precision,
                });
            }
            let variance = 1.0 / precision;
            let mean = (ordered_sum(&mut weighted) - extra * p.mu[i] as f64 / prior_var) * variance;
            mu.push(mean as f32);
            sigma.push(variance.sqrt() as f32);
        }
        tensors.push(FfgTensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            mu,
            sigma,
        });
    }
    Ok(ConsolidatedPosterior {
        posterior: FfgPosterior::new(tensors)?,
        prior_provenance: Vec::new(),
        site_provenance: Vec::new(),
        clamp_count,
    })
}

/// Consolidates site checkpoints against a prior checkpoint and packages the
/// result with the merged provenance chain.
pub fn consolidate_checkpoints(
    prior: &SiteCheckpoint,
    sites: &[SiteCheckpoint],
) -> Result<(SiteCheckpoint, ConsolidatedPosterior)> {
    let prior_post = prior
        .posterior()
        .ok_or_else(|| Error::InvalidInput("prior checkpoint must be variational".into()))?;
    let mut site_posts = Vec::with_capacity(sites.len());
    for s in sites {
        if s.spec != prior.spec {
            return Err(Error::Shape(
                "site checkpoint network spec differs from the prior's".into(),
            ));
        }
        site_posts.push(
            s.posterior()
                .ok_or_else(|| Error::InvalidInput("site checkpoints must be variational".into()))?
                .clone(),
        );
    }
    let mut merged = consolidate(prior_post, &site_posts)?;
    merged.prior_provenance = prior.provenance.clone();
    merged.site_provenance = sites.iter().map(|s| s.provenance.clone()).collect();
    let provenance = merged_provenance(&merged.prior_provenance, &merged.site_provenance);
    let mut ck =
        SiteCheckpoint::variational(prior.spec.clone(), merged.posterior.clone(), provenance)?;
    ck.notes
        .insert("clamp_count".into(), merged.clamp_count.to_string());
    Ok((ck, merged))
}

/// `prior + [suffix₁+suffix₂+…]` when every site chain extends the prior
/// chain; otherwise each full site chain is recorded in braces.
pub fn merged_provenance(prior: &[String], sites: &[Vec<String>]) -> Vec<String> {
    let extends = sites
        .iter()
        .all(|s| s.len() > prior.len() && s.starts_with(prior));
    let joined = if extends {
        sites
            .iter()
            .map(|s| s[prior.len()..].join(">"))
            .collect::<Vec<_>>()
            .join("+")
    } else {
        sites
            .iter()
            .map(|s| format!("{{{}}}", s.join(">")))
            .collect::<Vec<_>>()
            .join("+")
    };
    let mut out = prior.to_vec();
    out.push(joined);
    out
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DWCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    MapPoint,
    Variational,
}

impl CheckpointKind {
    fn code(self) -> u16 {
        match self {
            CheckpointKind::MapPoint => 0,
            CheckpointKind::Variational => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::MapPoint => "map-point",
            CheckpointKind::Variational => "variational",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointWeights {
    Point(WeightSet),
    Ffg(FfgPosterior),
}

/// The unit exchanged between sites: architecture, weights and the ordered
/// list of datasets the weights have seen.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteCheckpoint {
    pub spec: NetworkSpec,
    pub weights: CheckpointWeights,
    pub provenance: Vec<String>,
    /// Free-form annotations (training steps, clamp counts, ...).
    pub notes: BTreeMap<String, String>,
}

impl SiteCheckpoint {
    pub fn map_point(
        spec: NetworkSpec,
        weights: WeightSet,
        provenance: Vec<String>,
    ) -> Result<Self> {
        let ck = Self {
            spec,
            weights: CheckpointWeights::Point(weights),
            provenance,
            notes: BTreeMap::new(),
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn variational(
        spec: NetworkSpec,
        posterior: FfgPosterior,
        provenance: Vec<String>,
    ) -> Result<Self> {
        let ck = Self {
            spec,
            weights: CheckpointWeights::Ffg(posterior),
            provenance,
            notes: BTreeMap::new(),
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn kind(&self) -> CheckpointKind {
        match self.weights {
            CheckpointWeights::Point(_) => CheckpointKind::MapPoint,
            CheckpointWeights::Ffg(_) => CheckpointKind::Variational,
        }
    }

    pub fn posterior(&self) -> Option<&FfgPosterior> {
        match &self.weights {
            CheckpointWeights::Ffg(p) => Some(p),
            CheckpointWeights::Point(_) => None,
        }
    }

    /// Point weights, or posterior means for variational checkpoints.
    pub fn mean_weights(&self) -> WeightSet {
        match &self.weights {
            CheckpointWeights::Point(w) => w.clone(),
            CheckpointWeights::Ffg(p) => p.means(),
        }
    }

    /// Gaussian view of the checkpoint. MAP weights get a constant `sigma`.
    pub fn to_posterior(&self, map_sigma: f32) -> Result<FfgPosterior> {
        match &self.weights {
            CheckpointWeights::Ffg(p) => Ok(p.clone()),
            CheckpointWeights::Point(w) => FfgPosterior::from_point(w, map_sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.provenance.is_empty() {
            return Err(Error::InvalidInput("provenance must not be empty".into()));
        }
        for id in &self.provenance {
            check_identifier(id)?;
        }
        let layout = self.spec.tensor_layout();
        let shapes: Vec<(&str, &[usize])> = match &self.weights {
            CheckpointWeights::Point(w) => w
                .arrays
                .iter()
                .map(|a| (a.name.as_str(), a.shape.as_slice()))
                .collect(),
            CheckpointWeights::Ffg(p) => p
                .tensors()
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice()))
                .collect(),
        };
        let matches = layout.len() == shapes.len()
            && layout
                .iter()
                .zip(&shapes)
                .all(|((n, s), (n2, s2))| n == n2 && s.as_slice() == *s2);
        if !matches {
            return Err(Error::Shape(
                "weight tensors do not match the network spec layout".into(),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_checkpoint(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_checkpoint(path)
    }
}

fn check_identifier(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\n', ',', '=']) {
        return Err(Error::InvalidInput(format!(
            "dataset identifier {id:?} must be non-empty without newlines, commas or '='"
        )));
    }
    Ok(())
}

fn encode_metadata(ck: &SiteCheckpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!("kind={}\n", ck.kind().as_str()));
    out.push_str(&format!("provenance={}\n", ck.provenance.join(",")));
    for (k, v) in ck.spec.to_metadata() {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in &ck.notes {
        out.push_str(&format!("note.{k}={}\n", v.replace('\n', " ")));
    }
    out
}

/// Serializes a checkpoint. Layout (all integers little-endian):
///
/// ```text
/// "DWCK" | u16 version | u16 kind (0 map-point, 1 variational)
/// u32 metadata length | metadata (UTF-8 `key=value` lines)
/// u32 tensor count
/// per tensor: u16 name length | name | u8 ndim | ndim × u32 dims
///             | f32 mu[n] | f32 sigma[n] (variational only)
/// ```
pub fn encode_checkpoint(ck: &SiteCheckpoint) -> Result<Vec<u8>> {
    ck.validate()?;
    let meta = encode_metadata(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.kind().code().to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    let write_header = |buf: &mut Vec<u8>, name: &str, shape: &[usize]| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    };
    let write_f32s = |buf: &mut Vec<u8>, xs: &[f32]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    match &ck.weights {
        CheckpointWeights::Point(w) => {
            buf.extend_from_slice(&(w.arrays.len() as u32).to_le_bytes());
            for a in &w.arrays {
                write_header(&mut buf, &a.name, &a.shape);
                write_f32s(&mut buf, &a.data);
            }
        }
        CheckpointWeights::Ffg(p) => {
            buf.extend_from_slice(&(p.tensors().len() as u32).to_le_bytes());
            for t in p.tensors() {
                write_header(&mut buf, &t.name, &t.shape);
                write_f32s(&mut buf, &t.mu);
                write_f32s(&mut buf, &t.sigma);
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!("{context} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, context)?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, context)?.try_into().unwrap(),
        ))
    }

    fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            context: format!("{context}: array length overflow"),
        })?;
        Ok(self
            .take(len, context)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<SiteCheckpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let inconsistent = |detail: String| Error::SpecInconsistent {
        path: path.to_path_buf(),
        detail,
    };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let kind = match r.u16("kind")? {
        0 => CheckpointKind::MapPoint,
        1 => CheckpointKind::Variational,
        k => return Err(Error::Metadata(format!("unknown checkpoint kind {k}"))),
    };
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Metadata(format!("metadata is not UTF-8: {e}")))?;
    let mut fields = BTreeMap::new();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Metadata(format!("metadata line without '=': {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let meta_kind = fields
        .get("kind")
        .ok_or_else(|| Error::Metadata("missing `kind`".into()))?;
    if meta_kind != kind.as_str() {
        return Err(inconsistent(format!(
            "header kind {} but metadata says {meta_kind}",
            kind.as_str()
        )));
    }
    let provenance: Vec<String> = fields
        .get("provenance")
        .ok_or_else(|| Error::Metadata("missing `provenance`".into()))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let spec = NetworkSpec::from_metadata(&fields)?;
    let notes = fields
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("note.").map(|k| (k.to_string(), v.clone())))
        .collect();

    let count = r.u32("tensor count")? as usize;
    let layout = spec.tensor_layout();
    if count != layout.len() {
        return Err(inconsistent(format!(
            "{count} tensors stored, spec declares {}",
            layout.len()
        )));
    }
    let mut points = Vec::new();
    let mut ffg = Vec::new();
    for (name, shape) in &layout {
        let name_len = r.u16("tensor name length")? as usize;
        let stored_name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::Metadata(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dims")? as usize);
        }
        if &stored_name != name || &dims != shape {
            return Err(inconsistent(format!(
                "tensor `{stored_name}` {dims:?} where spec expects `{name}` {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mu = r.f32s(n, &format!("means of `{name}`"))?;
        match kind {
            CheckpointKind::MapPoint => points.push(NamedArray {
                name: stored_name,
                shape: dims,
                data: mu,
            }),
            CheckpointKind::Variational => {
                let sigma = r.f32s(n, &format!("sigmas of `{name}`"))?;
                ffg.push(FfgTensor {
                    name: stored_name,
                    shape: dims,
                    mu,
                    sigma,
                });
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(inconsistent(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let weights = match kind {
        CheckpointKind::MapPoint => CheckpointWeights::Point(WeightSet { arrays: points }),
        CheckpointKind::Variational => {
            CheckpointWeights::Ffg(FfgPosterior::new(ffg).map_err(|e| inconsistent(e.to_string()))?)
        }
    };
    let ck = SiteCheckpoint {
        spec,
        weights,
        provenance,
        notes,
    };
    ck.validate().map_err(|e| inconsistent(e.to_string()))?;
    Ok(ck)
}

pub fn write_checkpoint(ck: &SiteCheckpoint, path: &Path) -> Result<()> {
    io_util::atomic_write(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<SiteCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshnet::{init_map_weights, NetworkSpec};

    fn scalar(mu: f32, var: f32) -> FfgPosterior {
        FfgPosterior::new(vec![FfgTensor {
            name: "w".into(),
            shape: vec![1],
            mu: vec![mu],
            sigma: vec![var.sqrt()],
        }])
        .unwrap()
    }

    fn moments(p: &FfgPosterior) -> (f64, f64) {
        let t = &p.tensors()[0];
        (t.mu[0] as f64, (t.sigma[0] as f64).powi(2))
    }

    #[test]
    fn single_site_returns_site_exactly() {
        let prior = scalar(0.0, 1.0);
        let site = scalar(0.7, 0.3);
        let out = consolidate(&prior, std::slice::from_ref(&site)).unwrap();
        assert_eq!(out.posterior, site);
        assert_eq!(out.clamp_count, 0);
    }

    #[test]
    fn two_site_example() {
        let out = consolidate(&scalar(0.0, 1.0), &[scalar(1.0, 0.5), scalar(-1.0, 0.25)]).unwrap();
        let (m, v) = moments(&out.posterior);
        assert!((v - 0.2).abs() < 1e-6, "{v}");
        assert!((m + 0.4).abs() < 1e-6, "{m}");
    }

    #[test]
    fn three_identical_sites_example() {
        let s = scalar(0.2, 0.5);
        let out = consolidate(&scalar(0.0, 1.0), &[s.clone(), s.clone(), s]).unwrap();
        let (m, v) = moments(&out.posterior);
        assert!((v - 0.25).abs() < 1e-6);
        assert!((m - 0.3).abs() < 1e-6);
    }

    #[test]
    fn sites_equal_to_prior_return_prior() {
        let prior = scalar(0.4, 0.8);
        let out = consolidate(&prior, &[prior.clone(), prior.clone(), prior.clone()]).unwrap();
        let (m, v) = moments(&out.posterior);
        assert!((m - 0.4).abs() < 1e-6 && (v - 0.8).abs() < 1e-6);
    }

    #[test]
    fn clamp_examples() {
        let prior = scalar(0.0, 1.0);
        let (same, n) = clamp_site_variances(&prior, &scalar(0.3, 0.5)).unwrap();
        assert_eq!(n, 0);
        assert_eq!(same, scalar(0.3, 0.5));
        let (clamped, n) = clamp_site_variances(&prior, &scalar(0.3, 2.0)).unwrap();
        assert_eq!(n, 1);
        assert_eq!(moments(&clamped).1, 1.0);
    }

    #[test]
    fn clamping_counts_flow_into_consolidation() {
        let prior = scalar(0.0, 1.0);
        let out = consolidate(&prior, &[scalar(1.0, 4.0), scalar(1.0, 4.0)]).unwrap();
        assert_eq!(out.clamp_count, 2);
        // Both sites clamped to the prior variance: τ = 2 − 1 = 1.
        let (m, v) = moments(&out.posterior);
        assert!((v - 1.0).abs() < 1e-6 && (m - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let prior = scalar(0.0, 1.0);
        assert!(consolidate(&prior, &[]).is_err());
        let other = FfgPosterior::new(vec![FfgTensor {
            name: "w".into(),
            shape: vec![2],
            mu: vec![0.0; 2],
            sigma: vec![1.0; 2],
        }])
        .unwrap();
        assert!(matches!(
            consolidate(&prior, &[other]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn provenance_merging() {
        let h = vec!["H".to_string()];
        let sites = vec![
            vec!["H".to_string(), "N".to_string()],
            vec!["H".to_string(), "B".to_string()],
        ];
        assert_eq!(merged_provenance(&h, &sites), vec!["H", "N+B"]);
        let foreign = vec![
            vec!["X".to_string()],
            vec!["H".to_string(), "W".to_string()],
        ];
        assert_eq!(merged_provenance(&h, &foreign), vec!["H", "{X}+{H>W}"]);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let spec = NetworkSpec::tiny(1, 3, 2, &[1, 2]);
        let weights = init_map_weights(&spec, 3);
        let ck = SiteCheckpoint::map_point(spec.clone(), weights, vec!["H".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dwck");
        ck.write(&path).unwrap();
        assert_eq!(SiteCheckpoint::read(&path).unwrap(), ck);

        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 6];
        assert!(matches!(
            decode_checkpoint(cut, &path),
            Err(Error::Truncated { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        let err = decode_checkpoint(&v2, &path).unwrap_err();
        let text = err.to_string();
        assert!(text.contains('9') && text.contains('1'), "{text}");
    }

    #[test]
    fn empty_provenance_is_invalid() {
        let spec = NetworkSpec::tiny(1, 3, 2, &[1]);
        let weights = init_map_weights(&spec, 3);
        assert!(SiteCheckpoint::map_point(spec, weights, vec![]).is_err());
    }
}
