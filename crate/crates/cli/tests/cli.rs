use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dwc_core::sites::ExperimentPlan;

fn dwc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwc"))
        .args(args)
        .env("DWC_THREADS", "2")
        .output()
        .expect("dwc binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dwc(args);
    assert!(
        out.status.success(),
        "dwc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A smoke plan on disk plus its generated dataset directory.
fn smoke_data(root: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let plan = root.join("plan.toml");
    fs::write(&plan, ExperimentPlan::smoke(seed).to_toml()).unwrap();
    let data = root.join("data");
    let msg = ok(&["gen-data", "--plan", s(&plan), "--out", s(&data)]);
    assert!(msg.contains("volumes"), "{msg}");
    (plan, data)
}

#[test]
fn train_then_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path(), 3);
    let ck = dir.path().join("h.dwck");
    ok(&["train-map", "--data", s(&data), "--sites", "H,N", "--out", s(&ck), "--steps", "2"]);
    assert!(dir.path().join("h.loss.csv").exists());

    let text = ok(&["inspect-ckpt", s(&ck)]);
    assert!(text.contains("kind: map-point"), "{text}");
    assert!(text.contains("provenance: H>N"), "{text}");
    assert!(text.contains("tensor layer0.weight [3, 1, 3, 3, 3]"), "{text}");
    assert!(text.contains("note steps = 2"), "{text}");
}

#[test]
fn variational_workflow_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path(), 4);
    let p = |n: &str| dir.path().join(n);
    let steps = ["--steps", "2"];
    let train = |sub: &str, sites: &str, out: &Path, extra: &[&str]| {
        let mut a = vec![sub, "--data", s(&data), "--sites", sites, "--out", s(out)];
        a.extend_from_slice(&steps);
        a.extend_from_slice(extra);
        ok(&a)
    };
    train("train-vcl", "H", &p("h.dwck"), &[]);
    for site in ["N", "B", "W"] {
        let out = p(&format!("h-{site}.dwck"));
        train("train-vcl", site, &out, &["--prior", s(&p("h.dwck"))]);
    }
    assert!(ok(&["inspect-ckpt", s(&p("h-B.dwck"))]).contains("provenance: H>B"));

    let (n, b, w) = (p("h-N.dwck"), p("h-B.dwck"), p("h-W.dwck"));
    let (prior, merged) = (p("h.dwck"), p("dwc.dwck"));
    let msg = ok(&[
        "consolidate",
        "--prior",
        s(&prior),
        "--site",
        s(&n),
        "--site",
        s(&b),
        "--site",
        s(&w),
        "--out",
        s(&merged),
    ]);
    assert!(msg.contains("provenance H>N+B+W"), "{msg}");

    let msg = train("finetune", "H", &p("ft.dwck"), &["--prior", s(&p("dwc.dwck"))]);
    assert!(msg.contains("KL to prior"), "{msg}");
    let text = ok(&["inspect-ckpt", s(&p("ft.dwck"))]);
    assert!(text.contains("provenance: H>N+B+W>H") && text.contains("kind: variational"), "{text}");

    let models = [p("h-N.dwck"), p("h-B.dwck")].map(|x| s(&x).to_string()).join(",");
    let table = ok(&["ensemble-eval", "--models", &models, "--data", s(&data), "--out", s(&p("ens.csv"))]);
    assert!(table.starts_with("condition,H,N,B,W,weighted_avg,A\nEnsemble,"), "{table}");
    let tidy = fs::read_to_string(p("ens.csv")).unwrap();
    assert!(tidy.starts_with("condition,dataset,volume,class,dice\n"));
}

#[test]
fn evaluate_reports_perfect_dice_for_identical_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path(), 5);
    let manifest = data.join("labels.csv");
    let out = dir.path().join("dice.csv");
    let masks = dir.path().join("masks");
    let table = ok(&[
        "evaluate",
        "--pred",
        s(&manifest),
        "--truth",
        s(&manifest),
        "--out",
        s(&out),
        "--error-masks",
        s(&masks),
    ]);
    let tidy = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = tidy.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        assert!(row.ends_with(",1"), "{row}");
    }
    for line in table.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert_eq!(v, "1", "{table}");
        }
    }
    let mask = fs::read_dir(&masks).unwrap().next().unwrap().unwrap().path();
    let mask = dwc_core::Volume::read_raw(&mask).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn evaluate_a_model_and_export_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path(), 6);
    let ck = dir.path().join("m.dwck");
    ok(&["train-map", "--data", s(&data), "--sites", "H", "--out", s(&ck), "--steps", "1"]);
    let preds = dir.path().join("preds");
    let out = dir.path().join("model.csv");
    let summary = dir.path().join("summary.csv");
    ok(&[
        "evaluate",
        "--model",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--summary",
        s(&summary),
        "--predictions",
        s(&preds),
    ]);
    assert!(fs::read_to_string(&summary).unwrap().starts_with("condition,H,N,B,W,weighted_avg,A\n"));

    // Scoring the exported predictions reproduces the model's Dice.
    let again = dir.path().join("again.csv");
    ok(&[
        "evaluate",
        "--pred",
        s(&preds.join("labels.csv")),
        "--truth",
        s(&data.join("labels.csv")),
        "--out",
        s(&again),
    ]);
    let rows = |p: &Path| {
        let mut v: Vec<String> = fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.splitn(2, ',').nth(1).unwrap().to_string())
            .collect();
        v.sort();
        v
    };
    assert_eq!(rows(&out), rows(&again));
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    fs::write(&plan, ExperimentPlan::smoke(1).to_toml()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let table = ok(&["experiment", "--plan", s(&plan), "--seed", "7", "--out", s(&out)]);
        assert_eq!(table, fs::read_to_string(out.join("summary.csv")).unwrap());
        (fs::read(out.join("summary.csv")).unwrap(), fs::read(out.join("dice.csv")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let stored = ExperimentPlan::load(&dir.path().join("a/plan.toml")).unwrap();
    assert_eq!(stored.seed, 7);
}

#[test]
fn default_plan_parses_back() {
    let text = ok(&["default-plan"]);
    let plan = ExperimentPlan::parse(&text).unwrap();
    assert_eq!(plan, ExperimentPlan::desk_scale(7));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dwc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dwc(&["inspect-ckpt", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(dwc(&["train-map", "--data", "d"]).status.code(), Some(2));
    let out = dwc(&["evaluate", "--pred", "p", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn operation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dwck");
    let out = dwc(&["inspect-ckpt", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[E40]"));

    let garbage = dir.path().join("garbage.dwck");
    fs::write(&garbage, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = dwc(&["inspect-ckpt", s(&garbage)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[E20]: bad magic"));

    let out = Command::new(env!("CARGO_BIN_EXE_dwc"))
        .args(["default-plan"])
        .env("DWC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
