use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{valid_id, PhantomConfig, SiteProfile};
use crate::error::{Error, Result};
use crate::meshnet::{NetworkSpec, TrainConfig};
use crate::variational::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Point estimate trained on the union of `data`.
    Map,
    /// Variational network; `prior` names a variational condition (VCL) or is
    /// absent for N(0, 1).
    Variational,
    /// Closed-form fusion of `members` against `prior`.
    Consolidate,
    /// Variational training on `data` with `prior` as both prior and
    /// initialization, the data term weighted as a single volume.
    Finetune,
    /// Averaged output probabilities of `members`.
    Ensemble,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Map => "map",
            ConditionKind::Variational => "variational",
            ConditionKind::Consolidate => "consolidate",
            ConditionKind::Finetune => "finetune",
            ConditionKind::Ensemble => "ensemble",
        }
    }

    pub fn trains(self) -> bool {
        matches!(
            self,
            ConditionKind::Map | ConditionKind::Variational | ConditionKind::Finetune
        )
    }

    /// Produces a posterior usable as a prior or consolidation member.
    pub fn is_variational(self) -> bool {
        matches!(
            self,
            ConditionKind::Variational | ConditionKind::Consolidate | ConditionKind::Finetune
        )
    }
}

/// One row of the experiment: how a model is obtained from data and earlier
/// conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub kind: ConditionKind,
    /// Sites whose training volumes are used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
    /// Condition whose weights start training; defaults to the prior, or a
    /// random initialization when there is none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Condition {
    fn new(name: &str, kind: ConditionKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            data: Vec::new(),
            prior: None,
            init: None,
            members: Vec::new(),
            max_steps: None,
        }
    }

    pub fn map(name: &str, data: &[&str]) -> Self {
        Self {
            data: strings(data),
            ..Self::new(name, ConditionKind::Map)
        }
    }

    pub fn variational(name: &str, data: &[&str], prior: Option<&str>, init: Option<&str>) -> Self {
        Self {
            data: strings(data),
            prior: prior.map(str::to_string),
            init: init.map(str::to_string),
            ..Self::new(name, ConditionKind::Variational)
        }
    }

    pub fn consolidate(name: &str, prior: &str, members: &[&str]) -> Self {
        Self {
            prior: Some(prior.to_string()),
            members: strings(members),
            ..Self::new(name, ConditionKind::Consolidate)
        }
    }

    pub fn finetune(name: &str, prior: &str, data: &[&str]) -> Self {
        Self {
            prior: Some(prior.to_string()),
            data: strings(data),
            ..Self::new(name, ConditionKind::Finetune)
        }
    }

    pub fn ensemble(name: &str, members: &[&str]) -> Self {
        Self {
            members: strings(members),
            ..Self::new(name, ConditionKind::Ensemble)
        }
    }

    /// Conditions this one reads checkpoints from.
    pub fn dependencies(&self) -> Vec<&str> {
        self.prior
            .iter()
            .chain(&self.init)
            .chain(&self.members)
            .map(String::as_str)
            .collect()
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Everything needed to regenerate the data, train every condition and
/// evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub seed: u64,
    /// Sub-volume side used for training and tiled prediction.
    pub tile: usize,
    pub test_fraction: f64,
    /// Dataset name of the evaluation-only pool.
    pub heldout_name: String,
    pub phantom: PhantomConfig,
    pub network: NetworkSpec,
    pub map_train: TrainConfig,
    pub variational_train: TrainConfig,
    /// Training sites, in the column order of the summary table.
    pub sites: Vec<SiteProfile>,
    /// Profiles of the evaluation-only pool; never trained on.
    #[serde(default)]
    pub heldout: Vec<SiteProfile>,
    /// Conditions in execution order; references point backwards.
    pub conditions: Vec<Condition>,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment plan serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn site(&self, id: &str) -> Option<&SiteProfile> {
        self.sites.iter().find(|s| s.id == id)
    }

    /// Sub-volumes per volume; the fine-tuning data weight.
    pub fn tiles_per_volume(&self) -> usize {
        (self.phantom.side / self.tile).pow(3)
    }

    /// Per-condition seed for initialization, batching and noise; below
    /// 2^63 so config snapshots can store it as a TOML integer.
    pub fn condition_seed(&self, name: &str) -> u64 {
        mix_seed(self.seed, fnv1a(name)) >> 1
    }

    /// Geometry seed of training site `i`; held-out profiles follow the
    /// training sites.
    pub fn geometry_seed(&self, i: usize) -> u64 {
        mix_seed(self.seed ^ 0x6E0_6E0, i as u64)
    }

    /// Site profile with its noise seed tied to the plan seed.
    pub fn effective_profile(&self, profile: &SiteProfile) -> SiteProfile {
        SiteProfile {
            seed: mix_seed(self.seed, profile.seed),
            ..profile.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.phantom.validate()?;
        self.network.validate()?;
        self.map_train.validate()?;
        self.variational_train.validate()?;
        if self.tile == 0 || self.phantom.side % self.tile != 0 {
            return fail(format!(
                "tile {} must divide the volume side {}",
                self.tile, self.phantom.side
            ));
        }
        if self.network.input_channels != 1 || self.network.classes != self.phantom.classes {
            return fail(format!(
                "network must take one channel and predict {} classes",
                self.phantom.classes
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            ));
        }
        if self.sites.is_empty() {
            return fail("a plan needs at least one training site".into());
        }
        let mut ids = BTreeSet::new();
        for p in self.sites.iter().chain(&self.heldout) {
            p.validate()?;
            if !ids.insert(p.id.as_str()) {
                return fail(format!("duplicate site id `{}`", p.id));
            }
        }
        for p in &self.sites {
            if p.volumes < 2 {
                return fail(format!(
                    "site `{}` needs at least two volumes for a split",
                    p.id
                ));
            }
        }
        if !valid_id(&self.heldout_name) || ids.contains(self.heldout_name.as_str()) {
            return fail(format!(
                "held-out pool name `{}` must be a fresh identifier",
                self.heldout_name
            ));
        }
        let mut seen: Vec<&Condition> = Vec::new();
        for c in &self.conditions {
            self.validate_condition(c, &seen)?;
            seen.push(c);
        }
        Ok(())
    }

    fn validate_condition(&self, c: &Condition, earlier: &[&Condition]) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("condition `{}`: {m}", c.name)));
        if !valid_id(&c.name) {
            return fail("names use letters, digits, `_` or `-`");
        }
        if earlier.iter().any(|e| e.name == c.name) {
            return fail("duplicate name");
        }
        let find = |n: &str| earlier.iter().find(|e| e.name == n).copied();
        for dep in c.dependencies() {
            if find(dep).is_none() {
                return fail(&format!("`{dep}` must be defined by an earlier condition"));
            }
        }
        for d in &c.data {
            if self.site(d).is_none() {
                return fail(&format!("unknown training site `{d}`"));
            }
        }
        let variational = |n: &Option<String>| {
            n.as_deref()
                .and_then(find)
                .is_some_and(|e| e.kind.is_variational())
        };
        let has_data = !c.data.is_empty();
        let ok = match c.kind {
            ConditionKind::Map => has_data && c.prior.is_none() && c.members.is_empty(),
            ConditionKind::Variational => {
                has_data && c.members.is_empty() && (c.prior.is_none() || variational(&c.prior))
            }
            ConditionKind::Consolidate => {
                !has_data
                    && c.init.is_none()
                    && variational(&c.prior)
                    && !c.members.is_empty()
                    && c.members.iter().all(|m| variational(&Some(m.clone())))
            }
            ConditionKind::Finetune => has_data && c.members.is_empty() && variational(&c.prior),
            ConditionKind::Ensemble => {
                !has_data
                    && c.prior.is_none()
                    && c.init.is_none()
                    && c.members.len() >= 2
                    && c.members
                        .iter()
                        .all(|m| find(m).is_some_and(|e| e.kind != ConditionKind::Ensemble))
            }
        };
        if !ok {
            return fail(match c.kind {
                ConditionKind::Map => "MAP conditions need data and no prior or members",
                ConditionKind::Variational => {
                    "variational conditions need data, no members, and a variational prior if any"
                }
                ConditionKind::Consolidate => {
                    "consolidation needs a variational prior and variational members, no data"
                }
                ConditionKind::Finetune => "fine-tuning needs data and a variational prior",
                ConditionKind::Ensemble => {
                    "ensembles need two or more trained members and nothing else"
                }
            });
        }
        if c.init
            .as_deref()
            .and_then(find)
            .is_some_and(|e| !e.kind.trains() && e.kind != ConditionKind::Consolidate)
        {
            return fail("initialization must come from a trained or consolidated condition");
        }
        Ok(())
    }

    /// The benchmark at desk scale: four unequal sites, a pooled ceiling,
    /// VCL in both size orders, consolidation with and without fine-tuning,
    /// and the MAP ensemble.
    pub fn desk_scale(seed: u64) -> Self {
        let site =
            |id: &str, gamma: f64, noise: f64, field: f64, volumes: usize, s: u64| SiteProfile {
                id: id.to_string(),
                gain: 1.0,
                bias: 0.0,
                gamma,
                noise_sigma: noise,
                bias_field: field,
                volumes,
                seed: s,
            };
        let map_train = TrainConfig {
            learning_rate: 0.01,
            batch_size: 4,
            max_steps: 2000,
            // 500 sub-volumes per window, as 50 steps of 10 would be.
            convergence_window: 125,
            ..TrainConfig::default()
        };
        let variational_train = TrainConfig {
            max_steps: 500,
            mc_samples: 4,
            ..map_train.clone()
        };
        let sites = vec![
            site("H", 1.0, 0.005, 0.03, 100, 1),
            site("N", 0.4, 0.005, 0.03, 50, 2),
            site("B", 1.8, 0.005, 0.03, 25, 3),
            site("W", 3.0, 0.005, 0.03, 15, 4),
        ];
        let heldout = vec![
            site("A1", 0.6, 0.005, 0.03, 4, 5),
            site("A2", 1.35, 0.005, 0.03, 4, 6),
        ];
        use Condition as C;
        let conditions = vec![
            C::map("H_MAP", &["H"]),
            C::map("N_MAP", &["N"]),
            C::map("B_MAP", &["B"]),
            C::map("W_MAP", &["W"]),
            C::map("HNBW_MAP", &["H", "N", "B", "W"]),
            C::variational("H", &["H"], None, Some("H_MAP")),
            C::variational("H-N", &["N"], Some("H"), None),
            C::variational("H-B", &["B"], Some("H"), None),
            C::variational("H-W", &["W"], Some("H"), None),
            C::variational("H-N-B", &["B"], Some("H-N"), None),
            C::variational("H-N-B-W", &["W"], Some("H-N-B"), None),
            C::variational("H-W-B", &["B"], Some("H-W"), None),
            C::variational("H-W-B-N", &["N"], Some("H-W-B"), None),
            C::ensemble("Ensemble", &["H_MAP", "N_MAP", "B_MAP", "W_MAP"]),
            C::consolidate("DWC", "H", &["H-N", "H-B", "H-W"]),
            C::finetune("DWC-FT", "DWC", &["H"]),
        ];
        Self {
            seed,
            tile: 12,
            test_fraction: 0.1,
            heldout_name: "A".into(),
            phantom: PhantomConfig::default(),
            network: NetworkSpec::meshnet(1, 5, 8, &DESK_DILATIONS),
            map_train,
            variational_train,
            sites,
            heldout,
            conditions,
        }
    }

    /// The desk-scale condition set on 12³ volumes with a two-layer,
    /// three-filter network and a few steps per condition; for exercising
    /// the workflow, not for measuring it.
    pub fn smoke(seed: u64) -> Self {
        let mut p = Self::desk_scale(seed);
        p.phantom.side = 12;
        p.tile = 6;
        p.network = NetworkSpec::meshnet(1, p.phantom.classes, 3, &[1, 2]);
        for s in p.sites.iter_mut().chain(p.heldout.iter_mut()) {
            s.volumes = 3;
        }
        p.map_train.max_steps = 3;
        p.variational_train.max_steps = 3;
        p.variational_train.mc_samples = 2;
        p
    }
}

/// Hidden-layer dilations of the desk-scale network: MeshNet's 1, 2, 4
/// progression with one dilation-1 layer on either side.
pub const DESK_DILATIONS: [usize; 4] = [1, 2, 4, 1];

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_is_valid_and_round_trips() {
        let p = ExperimentPlan::desk_scale(7);
        p.validate().unwrap();
        assert_eq!(ExperimentPlan::parse(&p.to_toml()).unwrap(), p);
        assert_eq!(p.tiles_per_volume(), 8);
    }

    #[test]
    fn references_must_point_backwards() {
        let mut p = ExperimentPlan::desk_scale(7);
        let dwc = p.conditions.iter().position(|c| c.name == "DWC").unwrap();
        let c = p.conditions.remove(dwc);
        p.conditions.insert(0, c);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kinds_are_checked() {
        let base = ExperimentPlan::desk_scale(7);
        let bad = [
            Condition::consolidate("X", "H_MAP", &["H-N"]),
            Condition::variational("X", &["H"], Some("H_MAP"), None),
            Condition::ensemble("X", &["H_MAP"]),
            Condition::map("X", &["Q"]),
            Condition::finetune("X", "Ensemble", &["H"]),
            Condition::map("H MAP", &["H"]),
        ];
        for c in bad {
            let mut p = base.clone();
            p.conditions.push(c.clone());
            assert!(p.validate().is_err(), "{c:?}");
        }
        let mut p = base.clone();
        p.conditions.push(Condition::map("H_MAP", &["H"]));
        assert!(p.validate().is_err());
    }

    #[test]
    fn site_and_pool_ids_must_be_distinct() {
        let mut p = ExperimentPlan::desk_scale(7);
        p.heldout_name = "H".into();
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::desk_scale(7);
        p.heldout[0].id = "N".into();
        assert!(p.validate().is_err());
    }

    #[test]
    fn seeds_depend_on_plan_seed_and_name() {
        let a = ExperimentPlan::desk_scale(1);
        let b = ExperimentPlan::desk_scale(2);
        assert_ne!(a.condition_seed("H"), b.condition_seed("H"));
        assert_ne!(a.condition_seed("H"), a.condition_seed("N"));
        assert_ne!(a.geometry_seed(0), a.geometry_seed(1));
    }
}
