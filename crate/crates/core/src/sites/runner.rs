use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::dataset::{volume_examples, zscore, DatasetSplit};
use super::generator::{generate_site, LabeledVolume, SiteProfile};
use super::plan::{Condition, ConditionKind, ExperimentPlan};
use crate::consolidation::{
    consolidate_checkpoints, read_checkpoint, write_checkpoint, SiteCheckpoint,
};
use crate::error::{Error, Result};
use crate::eval::{dice_from_labels, DiceReport};
use crate::io_util::atomic_write_str;
use crate::meshnet::{
    init_map_weights, predict_mc, predict_volume, train, write_loss_log, Example, ModelConfig,
    NetParams, TrainConfig,
};
use crate::tensor::{FeatureMap, Volume};
use crate::variational::{kl_ffg, mix_seed, FfgPosterior, GaussianPrior};

/// Generated volumes of one site and their split. Held-out pools put every
/// volume in `split.test`.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub profile: SiteProfile,
    pub volumes: Vec<LabeledVolume>,
    pub split: DatasetSplit,
}

impl SiteData {
    pub fn volume_id(&self, index: usize) -> String {
        format!("{}-{index:03}", self.profile.id)
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub sites: Vec<SiteData>,
    pub heldout: Vec<SiteData>,
    pub heldout_name: String,
}

/// Generates every site of the plan and splits the training sites.
pub fn build_datasets(plan: &ExperimentPlan) -> Result<Datasets> {
    plan.validate()?;
    let profiles = plan.sites.iter().chain(&plan.heldout);
    let mut sites = Vec::new();
    let mut heldout = Vec::new();
    for (i, p) in profiles.enumerate() {
        let profile = plan.effective_profile(p);
        let volumes = generate_site(&profile, &plan.phantom, plan.geometry_seed(i))?;
        if i < plan.sites.len() {
            let split = DatasetSplit::new(
                volumes.len(),
                plan.test_fraction,
                mix_seed(plan.seed, i as u64),
            )?;
            sites.push(SiteData {
                profile,
                volumes,
                split,
            });
        } else {
            let split = DatasetSplit {
                train: Vec::new(),
                test: (0..volumes.len()).collect(),
                test_fraction: 1.0,
            };
            heldout.push(SiteData {
                profile,
                volumes,
                split,
            });
        }
    }
    Ok(Datasets {
        sites,
        heldout,
        heldout_name: plan.heldout_name.clone(),
    })
}

impl Datasets {
    pub fn site(&self, id: &str) -> Result<&SiteData> {
        self.sites
            .iter()
            .find(|s| s.profile.id == id)
            .ok_or_else(|| Error::Config(format!("unknown training site `{id}`")))
    }

    /// Training sub-volumes of the listed sites, site by site in volume order.
    pub fn train_examples(&self, site_ids: &[String], tile: usize) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for id in site_ids {
            let s = self.site(id)?;
            for &i in &s.split.train {
                out.extend(volume_examples(&s.volumes[i], tile)?);
            }
        }
        Ok(out)
    }

    pub fn train_volume_count(&self, site_ids: &[String]) -> Result<usize> {
        site_ids
            .iter()
            .map(|id| self.site(id).map(|s| s.split.train.len()))
            .sum()
    }

    /// Evaluation sets in report order: each training site's test volumes,
    /// then the held-out pool. Items are `(dataset, volume id, volume)`.
    pub fn evaluation_volumes(&self) -> Vec<(String, String, &LabeledVolume)> {
        let mut out = Vec::new();
        for s in &self.sites {
            for &i in &s.split.test {
                out.push((s.profile.id.clone(), s.volume_id(i), &s.volumes[i]));
            }
        }
        for s in &self.heldout {
            for &i in &s.split.test {
                out.push((self.heldout_name.clone(), s.volume_id(i), &s.volumes[i]));
            }
        }
        out
    }

    /// `volume_id,site,dataset,split` for every generated volume.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("volume_id,site,dataset,split\n");
        for s in &self.sites {
            for i in 0..s.volumes.len() {
                let split = if s.split.test.contains(&i) {
                    "test"
                } else {
                    "train"
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{split}",
                    s.volume_id(i),
                    s.profile.id,
                    s.profile.id
                );
            }
        }
        for s in &self.heldout {
            for i in 0..s.volumes.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},heldout",
                    s.volume_id(i),
                    s.profile.id,
                    self.heldout_name
                );
            }
        }
        out
    }
}

/// Result of one executed condition.
#[derive(Debug, Clone)]
pub struct ConditionOutcome {
    pub name: String,
    pub kind: ConditionKind,
    /// Absent for ensembles, which only exist at prediction time.
    pub checkpoint: Option<SiteCheckpoint>,
    pub steps: usize,
    pub converged: bool,
    /// `(KL(q ‖ prior), KL(q ‖ N(0, 1)))` after fine-tuning.
    pub finetune_kl: Option<(f64, f64)>,
}

pub fn condition_dir(out: &Path, name: &str) -> PathBuf {
    out.join("conditions").join(name)
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    condition_dir(out, name).join("checkpoint.dwck")
}

fn load(out: &Path, name: &str) -> Result<SiteCheckpoint> {
    let path = checkpoint_path(out, name);
    if !path.exists() {
        return Err(Error::MissingPrior(name.to_string()));
    }
    read_checkpoint(&path)
}

fn posterior_of(ck: &SiteCheckpoint, name: &str) -> Result<FfgPosterior> {
    ck.posterior()
        .cloned()
        .ok_or_else(|| Error::InvalidInput(format!("checkpoint of `{name}` is not variational")))
}

fn check_spec(ck: &SiteCheckpoint, plan: &ExperimentPlan, name: &str) -> Result<()> {
    if ck.spec != plan.network {
        return Err(Error::Shape(format!(
            "checkpoint of `{name}` was built for a different network"
        )));
    }
    Ok(())
}

/// Variational parameters starting from a checkpoint: its posterior, or its
/// point weights with `init_sigma`.
fn variational_init(ck: &SiteCheckpoint, cfg: &TrainConfig) -> Result<NetParams> {
    match ck.posterior() {
        Some(q) => NetParams::variational_from_posterior(&ck.spec, q),
        None => NetParams::variational_from_weights(&ck.spec, &ck.mean_weights(), cfg.init_sigma),
    }
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    condition: &'a Condition,
    model: ModelConfig,
}

fn write_condition_files(
    out: &Path,
    cond: &Condition,
    plan: &ExperimentPlan,
    cfg: &TrainConfig,
    ck: Option<&SiteCheckpoint>,
    log: &[crate::meshnet::LossRecord],
) -> Result<()> {
    let dir = condition_dir(out, &cond.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(ck) = ck {
        write_checkpoint(ck, &checkpoint_path(out, &cond.name))?;
    }
    write_loss_log(&dir.join("loss.csv"), log)?;
    let snap = ConfigSnapshot {
        condition: cond,
        model: ModelConfig {
            network: plan.network.clone(),
            train: cfg.clone(),
        },
    };
    let text = toml::to_string(&snap).map_err(|e| Error::Config(e.to_string()))?;
    atomic_write_str(&dir.join("config.toml"), &text)
}

/// Training settings of a condition: the plan's MAP or variational settings
/// with the condition's seed and step budget.
pub fn condition_config(plan: &ExperimentPlan, cond: &Condition) -> TrainConfig {
    let base = match cond.kind {
        ConditionKind::Map => &plan.map_train,
        _ => &plan.variational_train,
    };
    let mut cfg = base.clone();
    cfg.seed = plan.condition_seed(&cond.name);
    if let Some(s) = cond.max_steps {
        cfg.max_steps = s;
    }
    if cond.kind == ConditionKind::Finetune {
        cfg.data_weight_override = Some(plan.tiles_per_volume());
    }
    cfg
}

/// Fine-tunes `init` on `examples` with `prior` as the prior, returning the
/// checkpoint-ready posterior, the loss log, and
/// `(KL(q ‖ prior), KL(q ‖ N(0, 1)))`.
pub fn finetune(
    init: NetParams,
    prior: &FfgPosterior,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(crate::meshnet::TrainOutcome, FfgPosterior, (f64, f64))> {
    let q_prior = prior;
    let prior = GaussianPrior::Posterior(prior.clone());
    let (outcome, q) = if cfg.max_steps == 0 {
        // Skip the parameter round trip so the prior comes back bit for bit.
        let outcome = crate::meshnet::TrainOutcome {
            params: init,
            log: Vec::new(),
            steps: 0,
            converged: false,
            window_means: Vec::new(),
        };
        (outcome, q_prior.clone())
    } else {
        let outcome = train(init, examples, &prior, cfg)?;
        let q = outcome.params.posterior()?;
        (outcome, q)
    };
    let kl = (
        kl_ffg(&q, &prior)?,
        kl_ffg(&q, &GaussianPrior::standard_normal())?,
    );
    Ok((outcome, q, kl))
}

/// Consolidates site checkpoints against their shared prior, then fine-tunes
/// the result on `examples`, starting from and regularized towards the
/// consolidated posterior. Returns the consolidated and fine-tuned
/// checkpoints and the KL pair of [`finetune`].
pub fn run_dwc(
    prior: &SiteCheckpoint,
    sites: &[SiteCheckpoint],
    finetune_site: &str,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(SiteCheckpoint, SiteCheckpoint, (f64, f64))> {
    let (merged, _) = consolidate_checkpoints(prior, sites)?;
    let q0 = posterior_of(&merged, "consolidated")?;
    let init = NetParams::variational_from_posterior(&merged.spec, &q0)?;
    let (outcome, q, kl) = finetune(init, &q0, examples, cfg)?;
    let mut provenance = merged.provenance.clone();
    provenance.push(finetune_site.to_string());
    let mut ck = SiteCheckpoint::variational(merged.spec.clone(), q, provenance)?;
    ck.notes.insert("steps".into(), outcome.steps.to_string());
    Ok((merged, ck, kl))
}

/// Executes one condition, reading its dependencies from and writing its
/// outputs to `out/conditions/<name>/`.
pub fn run_condition(
    plan: &ExperimentPlan,
    cond: &Condition,
    data: &Datasets,
    out: &Path,
) -> Result<ConditionOutcome> {
    let cfg = condition_config(plan, cond);
    let spec = &plan.network;
    let mut outcome = ConditionOutcome {
        name: cond.name.clone(),
        kind: cond.kind,
        checkpoint: None,
        steps: 0,
        converged: false,
        finetune_kl: None,
    };
    let mut log = Vec::new();
    match cond.kind {
        ConditionKind::Map => {
            let examples = data.train_examples(&cond.data, plan.tile)?;
            let params = NetParams::map_from_weights(spec, &init_map_weights(spec, cfg.seed))?;
            let t = train(params, &examples, &GaussianPrior::standard_normal(), &cfg)?;
            let mut ck =
                SiteCheckpoint::map_point(spec.clone(), t.params.weights(), cond.data.clone())?;
            ck.notes.insert("steps".into(), t.steps.to_string());
            (outcome.steps, outcome.converged, log) = (t.steps, t.converged, t.log);
            outcome.checkpoint = Some(ck);
        }
        ConditionKind::Variational => {
            let examples = data.train_examples(&cond.data, plan.tile)?;
            let prior_ck = cond.prior.as_deref().map(|p| load(out, p)).transpose()?;
            if let (Some(ck), Some(name)) = (&prior_ck, &cond.prior) {
                check_spec(ck, plan, name)?;
            }
            let init = match cond.init.as_deref().or(cond.prior.as_deref()) {
                Some(name) => {
                    let ck = match (&prior_ck, cond.init.as_deref()) {
                        (Some(ck), None) => ck.clone(),
                        _ => load(out, name)?,
                    };
                    check_spec(&ck, plan, name)?;
                    variational_init(&ck, &cfg)?
                }
                None => NetParams::variational_from_weights(
                    spec,
                    &init_map_weights(spec, cfg.seed),
                    cfg.init_sigma,
                )?,
            };
            let (prior, mut provenance) = match &prior_ck {
                Some(ck) => (
                    GaussianPrior::Posterior(posterior_of(ck, cond.prior.as_deref().unwrap())?),
                    ck.provenance.clone(),
                ),
                None => (GaussianPrior::standard_normal(), Vec::new()),
            };
            provenance.extend(cond.data.iter().cloned());
            let t = train(init, &examples, &prior, &cfg)?;
            let mut ck =
                SiteCheckpoint::variational(spec.clone(), t.params.posterior()?, provenance)?;
            ck.notes.insert("steps".into(), t.steps.to_string());
            (outcome.steps, outcome.converged, log) = (t.steps, t.converged, t.log);
            outcome.checkpoint = Some(ck);
        }
        ConditionKind::Consolidate => {
            let prior_name = cond.prior.as_deref().expect("validated");
            let prior = load(out, prior_name)?;
            check_spec(&prior, plan, prior_name)?;
            let members = cond
                .members
                .iter()
                .map(|m| load(out, m))
                .collect::<Result<Vec<_>>>()?;
            let (ck, _) = consolidate_checkpoints(&prior, &members)?;
            outcome.checkpoint = Some(ck);
        }
        ConditionKind::Finetune => {
            let prior_name = cond.prior.as_deref().expect("validated");
            let prior_ck = load(out, prior_name)?;
            check_spec(&prior_ck, plan, prior_name)?;
            let q0 = posterior_of(&prior_ck, prior_name)?;
            let init = match cond.init.as_deref() {
                Some(name) => variational_init(&load(out, name)?, &cfg)?,
                None => NetParams::variational_from_posterior(spec, &q0)?,
            };
            let examples = data.train_examples(&cond.data, plan.tile)?;
            let (t, q, kl) = finetune(init, &q0, &examples, &cfg)?;
            let mut provenance = prior_ck.provenance.clone();
            provenance.extend(cond.data.iter().cloned());
            let mut ck = SiteCheckpoint::variational(spec.clone(), q, provenance)?;
            ck.notes.insert("steps".into(), t.steps.to_string());
            ck.notes.insert("kl_to_prior".into(), kl.0.to_string());
            ck.notes
                .insert("kl_to_standard_normal".into(), kl.1.to_string());
            (outcome.steps, outcome.converged, log) = (t.steps, t.converged, t.log);
            outcome.finetune_kl = Some(kl);
            outcome.checkpoint = Some(ck);
        }
        ConditionKind::Ensemble => {
            for m in &cond.members {
                check_spec(&load(out, m)?, plan, m)?;
            }
        }
    }
    write_condition_files(out, cond, plan, &cfg, outcome.checkpoint.as_ref(), &log)?;
    Ok(outcome)
}

/// Class probabilities of a checkpoint on a preprocessed volume: point
/// weights predict deterministically, posteriors average `mc_samples` draws.
pub fn predict_checkpoint(
    ck: &SiteCheckpoint,
    volume: &Volume,
    tile: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<FeatureMap> {
    match ck.posterior() {
        Some(q) => predict_mc(&ck.spec, q, volume, mc_samples, tile, seed),
        None => predict_volume(&ck.spec, &ck.mean_weights(), volume, tile),
    }
}

/// Unweighted mean of per-model probability maps.
pub fn average_probabilities(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
    let mut acc = vec![0f64; first.data().len()];
    for m in maps {
        if m.channels() != first.channels() || m.dims() != first.dims() {
            return Err(Error::Shape(
                "ensemble members disagree in output shape".into(),
            ));
        }
        for (a, x) in acc.iter_mut().zip(m.data()) {
            *a += *x as f64;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    FeatureMap::new(
        acc.into_iter().map(|a| (a * inv) as f32).collect(),
        first.channels(),
        first.dims(),
    )
}

/// Output-averaging ensemble of two or more checkpoints sharing one network.
pub fn run_ensemble(
    members: &[SiteCheckpoint],
    volume: &Volume,
    tile: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if members.len() < 2 {
        return Err(Error::InvalidInput(
            "an ensemble needs at least two models".into(),
        ));
    }
    if members.iter().any(|m| m.spec != members[0].spec) {
        return Err(Error::Shape(
            "ensemble members use different networks".into(),
        ));
    }
    let maps = members
        .iter()
        .enumerate()
        .map(|(i, m)| predict_checkpoint(m, volume, tile, mc_samples, mix_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    average_probabilities(&maps)
}

/// Dice of every condition on every evaluation volume. Member predictions
/// are reused by ensembles.
pub fn evaluate_plan(plan: &ExperimentPlan, data: &Datasets, out: &Path) -> Result<DiceReport> {
    let evals = data.evaluation_volumes();
    let inputs = evals
        .iter()
        .map(|(_, _, v)| zscore(&v.image))
        .collect::<Result<Vec<_>>>()?;
    let datasets = plan.sites.iter().map(|s| s.id.clone()).collect();
    let heldout = (!data.heldout.is_empty()).then(|| plan.heldout_name.clone());
    let mut report = DiceReport::new(datasets, heldout);
    let mut cache: BTreeMap<String, Vec<FeatureMap>> = BTreeMap::new();
    for cond in &plan.conditions {
        let probs = match cond.kind {
            ConditionKind::Ensemble => (0..inputs.len())
                .map(|v| {
                    let maps: Vec<FeatureMap> =
                        cond.members.iter().map(|m| cache[m][v].clone()).collect();
                    average_probabilities(&maps)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => {
                let ck = load(out, &cond.name)?;
                let mc = plan.variational_train.mc_samples;
                let seed = mix_seed(plan.condition_seed(&cond.name), 0xE7A1);
                inputs
                    .iter()
                    .enumerate()
                    .map(|(v, x)| {
                        predict_checkpoint(&ck, x, plan.tile, mc, mix_seed(seed, v as u64))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        for ((dataset, id, vol), p) in evals.iter().zip(&probs) {
            let dice = dice_from_labels(
                &p.argmax_channels(),
                &vol.label_indices(),
                plan.phantom.classes,
            )?;
            report.add_volume(&cond.name, dataset, id, &dice);
        }
        cache.insert(cond.name.clone(), probs);
    }
    Ok(report)
}

/// Everything an experiment run produces besides the files on disk.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: DiceReport,
    pub conditions: Vec<ConditionOutcome>,
}

impl ExperimentOutcome {
    pub fn condition(&self, name: &str) -> Option<&ConditionOutcome> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// `condition,kind,steps,converged` per condition.
    pub fn training_csv(&self) -> String {
        let mut out = String::from("condition,kind,steps,converged\n");
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                c.name,
                c.kind.as_str(),
                c.steps,
                c.converged
            );
        }
        out
    }

    /// Sequential (VCL) conditions with their provenance order, training
    /// steps and Dice, so the two chain orders can be compared.
    pub fn vcl_order_csv(&self, plan: &ExperimentPlan) -> String {
        let mut out = String::from("condition,order,steps,converged,weighted_avg");
        if let Some(h) = &self.report.heldout {
            let _ = write!(out, ",{h}");
        }
        out.push('\n');
        for cond in plan
            .conditions
            .iter()
            .filter(|c| c.kind == ConditionKind::Variational && c.prior.is_some())
        {
            let Some(o) = self.condition(&cond.name) else {
                continue;
            };
            let order = o
                .checkpoint
                .as_ref()
                .map(|ck| ck.provenance.join(">"))
                .unwrap_or_default();
            let avg = self.report.weighted_average(&cond.name).unwrap_or(f64::NAN);
            let _ = write!(
                out,
                "{},{order},{},{},{avg}",
                cond.name, o.steps, o.converged
            );
            if let Some(h) = &self.report.heldout {
                let m = self.report.dataset_mean(&cond.name, h).unwrap_or(f64::NAN);
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
        out
    }
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIDY_FILE: &str = "dice.csv";

/// Generates the data, runs every condition in plan order, evaluates them
/// and writes `manifest.csv`, `plan.toml`, `training.csv`, `vcl_order.csv`,
/// the tidy Dice table and the summary table under `out`.
pub fn run_experiment(plan: &ExperimentPlan, out: &Path) -> Result<ExperimentOutcome> {
    run_experiment_with(plan, out, &mut |_| {})
}

/// [`run_experiment`] calling `on_condition` after each condition finishes.
pub fn run_experiment_with(
    plan: &ExperimentPlan,
    out: &Path,
    on_condition: &mut dyn FnMut(&ConditionOutcome),
) -> Result<ExperimentOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = build_datasets(plan)?;
    atomic_write_str(&out.join("manifest.csv"), &data.manifest_csv())?;
    atomic_write_str(&out.join("plan.toml"), &plan.to_toml())?;
    let mut conditions = Vec::with_capacity(plan.conditions.len());
    for cond in &plan.conditions {
        let o = run_condition(plan, cond, &data, out)?;
        on_condition(&o);
        conditions.push(o);
    }
    let report = evaluate_plan(plan, &data, out)?;
    let summary_csv = report.summary_csv();
    report.check_consistency(&report.parse_summary_csv(&summary_csv)?)?;
    let outcome = ExperimentOutcome { report, conditions };
    atomic_write_str(&out.join(TIDY_FILE), &outcome.report.tidy_csv())?;
    atomic_write_str(&out.join(SUMMARY_FILE), &summary_csv)?;
    atomic_write_str(&out.join("training.csv"), &outcome.training_csv())?;
    atomic_write_str(&out.join("vcl_order.csv"), &outcome.vcl_order_csv(plan))?;
    Ok(outcome)
}
