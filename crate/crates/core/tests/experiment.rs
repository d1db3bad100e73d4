use std::fs;

use dwc_core::consolidation::{read_checkpoint, SiteCheckpoint};
use dwc_core::meshnet::{init_map_weights, NetworkSpec};
use dwc_core::sites::{
    average_probabilities, build_datasets, checkpoint_path, condition_dir, run_condition, run_dwc,
    run_experiment, Condition, ExperimentPlan, SUMMARY_FILE, TIDY_FILE,
};
use dwc_core::tensor::FeatureMap;
use dwc_core::variational::FfgPosterior;
use dwc_core::Error;

#[test]
fn smoke_experiment_writes_every_artifact_and_reproduces() {
    let plan = ExperimentPlan::smoke(5);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&plan, a.path()).unwrap();
    run_experiment(&plan, b.path()).unwrap();

    for file in [
        SUMMARY_FILE,
        TIDY_FILE,
        "manifest.csv",
        "plan.toml",
        "training.csv",
        "vcl_order.csv",
    ] {
        let x = fs::read(a.path().join(file)).unwrap();
        assert_eq!(
            x,
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs between runs"
        );
    }
    for c in &plan.conditions {
        let dir = condition_dir(a.path(), &c.name);
        assert!(
            dir.join("loss.csv").exists() && dir.join("config.toml").exists(),
            "{}",
            c.name
        );
        assert_eq!(
            checkpoint_path(a.path(), &c.name).exists(),
            c.name != "Ensemble"
        );
    }

    let summary = fs::read_to_string(a.path().join(SUMMARY_FILE)).unwrap();
    let rows = outcome.report.parse_summary_csv(&summary).unwrap();
    outcome.report.check_consistency(&rows).unwrap();
    assert_eq!(rows.len(), plan.conditions.len());
    assert!(outcome
        .report
        .rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.dice)));

    let vcl = fs::read_to_string(a.path().join("vcl_order.csv")).unwrap();
    assert!(
        vcl.contains("H-N-B-W,H>N>B>W,") && vcl.contains("H-W-B-N,H>W>B>N,"),
        "{vcl}"
    );
}

#[test]
fn provenance_and_data_bookkeeping() {
    let plan = ExperimentPlan::smoke(9);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&plan, dir.path()).unwrap();
    let prov = |name: &str| {
        outcome
            .condition(name)
            .and_then(|c| c.checkpoint.as_ref())
            .map(|ck| ck.provenance.join(">"))
            .unwrap()
    };
    assert_eq!(prov("H"), "H");
    assert_eq!(prov("H-N"), "H>N");
    assert_eq!(prov("H-N-B-W"), "H>N>B>W");
    assert_eq!(prov("HNBW_MAP"), "H>N>B>W");
    assert_eq!(prov("DWC"), "H>N+B+W");
    assert_eq!(prov("DWC-FT"), "H>N+B+W>H");

    let on_disk = read_checkpoint(&checkpoint_path(dir.path(), "H-N")).unwrap();
    assert_eq!(
        Some(&on_disk),
        outcome.condition("H-N").unwrap().checkpoint.as_ref()
    );

    let data = build_datasets(&plan).unwrap();
    let pooled = data
        .train_examples(&plan.condition("HNBW_MAP").unwrap().data, plan.tile)
        .unwrap();
    let separate: usize = ["H", "N", "B", "W"]
        .iter()
        .map(|s| {
            data.train_examples(&[s.to_string()], plan.tile)
                .unwrap()
                .len()
        })
        .sum();
    assert_eq!(pooled.len(), separate);
}

#[test]
fn finetuned_posterior_reports_both_divergences() {
    let plan = ExperimentPlan::smoke(2);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&plan, dir.path()).unwrap();
    let (to_prior, to_standard) = outcome.condition("DWC-FT").unwrap().finetune_kl.unwrap();
    assert!(to_prior.is_finite() && to_standard.is_finite());
    assert!(
        to_prior >= 0.0 && to_standard > 0.0,
        "{to_prior} vs {to_standard}"
    );

    let config =
        fs::read_to_string(condition_dir(dir.path(), "DWC-FT").join("config.toml")).unwrap();
    assert!(config.contains("data_weight_override = 8"), "{config}");
}

#[test]
fn zero_finetune_steps_keep_the_consolidated_posterior() {
    let plan = ExperimentPlan::smoke(4);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&plan, dir.path()).unwrap();
    let load = |n: &str| read_checkpoint(&checkpoint_path(dir.path(), n)).unwrap();
    let sites: Vec<SiteCheckpoint> = ["H-N", "H-B", "H-W"].iter().map(|n| load(n)).collect();
    let data = build_datasets(&plan).unwrap();
    let examples = data.train_examples(&["H".to_string()], plan.tile).unwrap();
    let mut cfg = plan.variational_train.clone();
    cfg.max_steps = 0;
    let (merged, tuned, (to_prior, _)) = run_dwc(&load("H"), &sites, "H", &examples, &cfg).unwrap();
    assert_eq!(merged.posterior(), tuned.posterior());
    assert_eq!(to_prior, 0.0);
    assert_eq!(merged, load("DWC"));
    assert_eq!(tuned.provenance.join(">"), "H>N+B+W>H");
}

#[test]
fn missing_and_mismatched_priors_are_rejected() {
    let plan = ExperimentPlan::smoke(1);
    let data = build_datasets(&plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let vcl = plan.condition("H-N").unwrap();
    assert!(matches!(
        run_condition(&plan, vcl, &data, dir.path()),
        Err(Error::MissingPrior(p)) if p == "H"
    ));

    let other = NetworkSpec::meshnet(1, 5, 2, &[1]);
    let q = FfgPosterior::from_point(&init_map_weights(&other, 0), 0.1).unwrap();
    let ck = SiteCheckpoint::variational(other, q, vec!["H".into()]).unwrap();
    fs::create_dir_all(condition_dir(dir.path(), "H")).unwrap();
    ck.write(&checkpoint_path(dir.path(), "H")).unwrap();
    assert!(matches!(
        run_condition(&plan, vcl, &data, dir.path()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn ensemble_averages_probabilities() {
    let c = 4;
    let n = 27;
    let uniform = FeatureMap::new(vec![0.25; c * n], c, [3; 3]).unwrap();
    let mut one_hot = vec![0f32; c * n];
    for v in 0..n {
        one_hot[(v % c) * n + v] = 1.0;
    }
    let perfect = FeatureMap::new(one_hot, c, [3; 3]).unwrap();
    let mid = average_probabilities(&[uniform, perfect.clone()]).unwrap();
    for v in 0..n {
        let mut total = 0.0;
        for k in 0..c {
            let want = if k == v % c { 0.625 } else { 0.125 };
            assert_eq!(mid.channel(k)[v], want);
            total += mid.channel(k)[v];
        }
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert_eq!(
        average_probabilities(&[perfect.clone(), perfect.clone()]).unwrap(),
        perfect
    );
}

#[test]
fn plans_reject_conditions_without_their_inputs() {
    let mut plan = ExperimentPlan::smoke(1);
    plan.conditions
        .push(Condition::finetune("late", "missing", &["H"]));
    assert!(matches!(plan.validate(), Err(Error::Config(_))));
}
