use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwc_core::consolidation::{consolidate_checkpoints, read_checkpoint, write_checkpoint, SiteCheckpoint};
use dwc_core::eval::{dice_per_class, export_error_mask, DiceReport};
use dwc_core::io_util::atomic_write_str;
use dwc_core::meshnet::{init_map_weights, train, write_loss_log, ModelConfig, NetParams, TrainConfig};
use dwc_core::sites::{
    build_datasets, finetune, predict_checkpoint, run_ensemble, run_experiment_with, zscore,
    ExperimentPlan, SUMMARY_FILE,
};
use dwc_core::tensor::Volume;
use dwc_core::variational::{mix_seed, GaussianPrior};
use dwc_core::NetworkSpec;

use crate::data::{read_label_manifest, write_dataset_dir, write_label_manifest, DatasetDir};
use crate::{Command, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, plan, seed } => gen_data(&out, plan.as_deref(), seed),
        Command::TrainMap(args) => train_map(&args),
        Command::TrainVcl { train, prior, init } => train_vcl(&train, prior.as_deref(), init.as_deref()),
        Command::Consolidate { prior, sites, out } => consolidate(&prior, &sites, &out),
        Command::Finetune { train, prior } => finetune_cmd(&train, &prior),
        Command::EnsembleEval {
            models,
            data,
            out,
            name,
            seed,
        } => ensemble_eval(&models, &data, &out, &name, seed),
        Command::Evaluate {
            pred,
            truth,
            model,
            data,
            classes,
            out,
            summary,
            error_masks,
            predictions,
            name,
            seed,
        } => {
            let report = match (pred, truth, model, data) {
                (Some(p), Some(t), None, None) => evaluate_manifests(&p, &t, classes, &name, error_masks.as_deref())?,
                (None, None, Some(m), Some(d)) => {
                    evaluate_model(&m, &d, &name, seed, error_masks.as_deref(), predictions.as_deref())?
                }
                _ => bail!("evaluate needs either --pred and --truth, or --model and --data"),
            };
            write_report(&report, &out, summary.as_deref())
        }
        Command::Experiment { out, plan, seed } => experiment(&out, plan.as_deref(), seed),
        Command::InspectCkpt { path } => inspect(&path),
        Command::DefaultPlan => {
            print!("{}", ExperimentPlan::desk_scale(7).to_toml());
            Ok(())
        }
    }
}

fn load_plan(plan: Option<&Path>, seed: Option<u64>) -> Result<ExperimentPlan> {
    let plan = match plan {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::desk_scale(7),
    };
    Ok(match seed {
        Some(s) => plan.with_seed(s),
        None => plan,
    })
}

fn gen_data(out: &Path, plan: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let plan = load_plan(plan, seed)?;
    let data = build_datasets(&plan)?;
    let n = write_dataset_dir(&plan, &data, out)?;
    println!("wrote {n} volumes for {} sites to {}", data.sites.len() + data.heldout.len(), out.display());
    Ok(())
}

/// Network and training settings for a training subcommand.
fn settings(args: &TrainArgs, dir: &DatasetDir, variational: bool) -> Result<(NetworkSpec, TrainConfig)> {
    let (spec, mut cfg) = match &args.config {
        Some(path) => {
            let c = ModelConfig::load(path)?;
            (c.network, c.train)
        }
        None => {
            let base = if variational {
                &dir.plan.variational_train
            } else {
                &dir.plan.map_train
            };
            (dir.plan.network.clone(), base.clone())
        }
    };
    if let Some(s) = args.steps {
        cfg.max_steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    Ok((spec, cfg))
}

fn loss_log_path(args: &TrainArgs) -> PathBuf {
    args.loss_log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"))
}

fn finish(mut ck: SiteCheckpoint, args: &TrainArgs, t: &dwc_core::meshnet::TrainOutcome) -> Result<()> {
    ck.notes.insert("steps".into(), t.steps.to_string());
    write_checkpoint(&ck, &args.out)?;
    write_loss_log(&loss_log_path(args), &t.log)?;
    println!(
        "trained {} steps (converged: {}), final loss {:.6}; wrote {}",
        t.steps,
        t.converged,
        t.log.last().map_or(f64::NAN, |r| r.total),
        args.out.display()
    );
    Ok(())
}

fn train_map(args: &TrainArgs) -> Result<()> {
    let dir = DatasetDir::open(&args.data)?;
    let (spec, cfg) = settings(args, &dir, false)?;
    let (examples, _) = dir.train_examples(&args.sites, dir.plan.tile)?;
    let params = NetParams::map_from_weights(&spec, &init_map_weights(&spec, cfg.seed))?;
    let t = train(params, &examples, &GaussianPrior::standard_normal(), &cfg)?;
    let ck = SiteCheckpoint::map_point(spec, t.params.weights(), args.sites.clone())?;
    finish(ck, args, &t)
}

fn variational_start(ck: &SiteCheckpoint, cfg: &TrainConfig) -> Result<NetParams> {
    Ok(match ck.posterior() {
        Some(q) => NetParams::variational_from_posterior(&ck.spec, q)?,
        None => NetParams::variational_from_weights(&ck.spec, &ck.mean_weights(), cfg.init_sigma)?,
    })
}

fn same_network(ck: &SiteCheckpoint, spec: &NetworkSpec, path: &Path) -> Result<()> {
    if &ck.spec != spec {
        bail!("{} was trained with a different network", path.display());
    }
    Ok(())
}

fn train_vcl(args: &TrainArgs, prior: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let dir = DatasetDir::open(&args.data)?;
    let (spec, cfg) = settings(args, &dir, true)?;
    let prior_ck = prior.map(read_checkpoint).transpose()?;
    let start = match (init, &prior_ck) {
        (Some(p), _) => {
            let ck = read_checkpoint(p)?;
            same_network(&ck, &spec, p)?;
            variational_start(&ck, &cfg)?
        }
        (None, Some(ck)) => variational_start(ck, &cfg)?,
        (None, None) => NetParams::variational_from_weights(&spec, &init_map_weights(&spec, cfg.seed), cfg.init_sigma)?,
    };
    let (gprior, mut provenance) = match (&prior_ck, prior) {
        (Some(ck), Some(path)) => {
            same_network(ck, &spec, path)?;
            let q = ck
                .posterior()
                .with_context(|| format!("prior {} is not variational", path.display()))?;
            (GaussianPrior::Posterior(q.clone()), ck.provenance.clone())
        }
        _ => (GaussianPrior::standard_normal(), Vec::new()),
    };
    provenance.extend(args.sites.iter().cloned());
    let (examples, _) = dir.train_examples(&args.sites, dir.plan.tile)?;
    let t = train(start, &examples, &gprior, &cfg)?;
    let ck = SiteCheckpoint::variational(spec, t.params.posterior()?, provenance)?;
    finish(ck, args, &t)
}

fn consolidate(prior: &Path, sites: &[PathBuf], out: &Path) -> Result<()> {
    let prior_ck = read_checkpoint(prior)?;
    let site_cks = sites.iter().map(|p| read_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    let (ck, merged) = consolidate_checkpoints(&prior_ck, &site_cks)?;
    write_checkpoint(&ck, out)?;
    println!(
        "consolidated {} sites; {} site variances clamped; provenance {}; wrote {}",
        site_cks.len(),
        merged.clamp_count,
        ck.provenance.join(">"),
        out.display()
    );
    Ok(())
}

fn finetune_cmd(args: &TrainArgs, prior: &Path) -> Result<()> {
    let dir = DatasetDir::open(&args.data)?;
    let (spec, mut cfg) = settings(args, &dir, true)?;
    cfg.data_weight_override = Some(dir.plan.tiles_per_volume());
    let prior_ck = read_checkpoint(prior)?;
    same_network(&prior_ck, &spec, prior)?;
    let q0 = prior_ck
        .posterior()
        .with_context(|| format!("prior {} is not variational", prior.display()))?;
    let (examples, _) = dir.train_examples(&args.sites, dir.plan.tile)?;
    let init = NetParams::variational_from_posterior(&spec, q0)?;
    let (t, q, (kl_prior, kl_standard)) = finetune(init, q0, &examples, &cfg)?;
    let mut provenance = prior_ck.provenance.clone();
    provenance.extend(args.sites.iter().cloned());
    let mut ck = SiteCheckpoint::variational(spec, q, provenance)?;
    ck.notes.insert("kl_to_prior".into(), kl_prior.to_string());
    ck.notes.insert("kl_to_standard_normal".into(), kl_standard.to_string());
    println!("KL to prior {kl_prior:.6}, KL to N(0, 1) {kl_standard:.6}");
    finish(ck, args, &t)
}

fn ensemble_eval(models: &[PathBuf], data: &Path, out: &Path, name: &str, seed: Option<u64>) -> Result<()> {
    let dir = DatasetDir::open(data)?;
    let cks = models.iter().map(|p| read_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    let seed = seed.unwrap_or(dir.plan.seed);
    let mut report = new_report(&dir);
    for (v, (dataset, id, vol)) in dir.evaluation_volumes()?.into_iter().enumerate() {
        let probs = run_ensemble(
            &cks,
            &zscore(&vol.image)?,
            dir.plan.tile,
            dir.plan.variational_train.mc_samples,
            mix_seed(seed, v as u64),
        )?;
        let pred = labels_volume(&probs.argmax_channels(), vol.labels.dims())?;
        report.add_volume(name, &dataset, &id, &dice_per_class(&pred, &vol.labels, dir.plan.phantom.classes)?);
    }
    write_report(&report, out, None)
}

fn new_report(dir: &DatasetDir) -> DiceReport {
    DiceReport::new(
        dir.plan.sites.iter().map(|s| s.id.clone()).collect(),
        (!dir.plan.heldout.is_empty()).then(|| dir.plan.heldout_name.clone()),
    )
}

fn labels_volume(labels: &[u32], dims: [usize; 3]) -> Result<Volume> {
    Ok(Volume::new(labels.iter().map(|&l| l as f32).collect(), dims)?)
}

fn evaluate_model(
    model: &Path,
    data: &Path,
    name: &str,
    seed: Option<u64>,
    masks: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<DiceReport> {
    let dir = DatasetDir::open(data)?;
    let ck = read_checkpoint(model)?;
    let seed = seed.unwrap_or(dir.plan.seed);
    let mut report = new_report(&dir);
    let mut predicted = Vec::new();
    for (v, (dataset, id, vol)) in dir.evaluation_volumes()?.into_iter().enumerate() {
        let probs = predict_checkpoint(
            &ck,
            &zscore(&vol.image)?,
            dir.plan.tile,
            dir.plan.variational_train.mc_samples,
            mix_seed(seed, v as u64),
        )?;
        let pred = labels_volume(&probs.argmax_channels(), vol.labels.dims())?;
        report.add_volume(name, &dataset, &id, &dice_per_class(&pred, &vol.labels, dir.plan.phantom.classes)?);
        if let Some(m) = masks {
            export_mask(&pred, &vol.labels, m, &id)?;
        }
        predicted.push((dataset, id, pred));
    }
    if let Some(p) = predictions {
        write_label_manifest(p, &predicted)?;
    }
    Ok(report)
}

fn export_mask(pred: &Volume, truth: &Volume, dir: &Path, id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    export_error_mask(pred, truth, &dir.join(format!("{id}.errors.dwcv")))?;
    Ok(())
}

fn evaluate_manifests(pred: &Path, truth: &Path, classes: usize, name: &str, masks: Option<&Path>) -> Result<DiceReport> {
    let preds = read_label_manifest(pred)?;
    let truths = read_label_manifest(truth)?;
    let mut datasets: Vec<String> = Vec::new();
    for (d, _) in truths.values() {
        if !datasets.contains(d) {
            datasets.push(d.clone());
        }
    }
    let mut report = DiceReport::new(datasets, None);
    for (id, (dataset, t)) in &truths {
        let (_, p) = preds
            .get(id)
            .with_context(|| format!("no prediction for volume `{id}`"))?;
        report.add_volume(name, dataset, id, &dice_per_class(p, t, classes)?);
        if let Some(m) = masks {
            export_mask(p, t, m, id)?;
        }
    }
    if let Some(extra) = preds.keys().find(|k| !truths.contains_key(*k)) {
        bail!("prediction for `{extra}` has no ground truth");
    }
    Ok(report)
}

fn write_report(report: &DiceReport, out: &Path, summary: Option<&Path>) -> Result<()> {
    atomic_write_str(out, &report.tidy_csv())?;
    let table = report.summary_csv();
    report.check_consistency(&report.parse_summary_csv(&table)?)?;
    if let Some(s) = summary {
        atomic_write_str(s, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn experiment(out: &Path, plan: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let plan = load_plan(plan, seed)?;
    let started = std::time::Instant::now();
    let outcome = run_experiment_with(&plan, out, &mut |c| {
        eprintln!(
            "[{:>7.1}s] {:<10} {:<12} steps {:>5}{}",
            started.elapsed().as_secs_f64(),
            c.name,
            c.kind.as_str(),
            c.steps,
            if c.converged { " (converged)" } else { "" }
        );
    })?;
    for c in &outcome.conditions {
        if let Some((p, s)) = c.finetune_kl {
            eprintln!("{}: KL to consolidated prior {p:.4}, KL to N(0, 1) {s:.4}", c.name);
        }
    }
    print!("{}", outcome.report.summary_csv());
    eprintln!("wrote {}", out.join(SUMMARY_FILE).display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = read_checkpoint(path)?;
    println!("kind: {}", ck.kind().as_str());
    println!(
        "network: {} input channel(s), {} classes, {} layers, {} weights",
        ck.spec.input_channels,
        ck.spec.classes,
        ck.spec.layers.len(),
        ck.spec.num_weights()
    );
    for (i, l) in ck.spec.layers.iter().enumerate() {
        println!(
            "layer{i}: filters {} half {:?} dilation {} padding {} {:?}",
            l.filters, l.half, l.dilation, l.padding, l.activation
        );
    }
    for (name, shape) in ck.spec.tensor_layout() {
        println!("tensor {name} {shape:?}");
    }
    println!("provenance: {}", ck.provenance.join(">"));
    for (k, v) in &ck.notes {
        println!("note {k} = {v}");
    }
    Ok(())
}
