use std::path::Path;
use std::process::{Command, Output};

fn irispad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irispad")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: [&str; 8] = ["--input-size", "32", "--width-divisor", "16", "--fc-width", "16", "--epochs", "2"];

#[test]
fn synth_quality_train_evaluate_explain() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let manifest = corpus.join("manifest.csv");

    let o = irispad(&["synth", "--out", s(&corpus), "--subjects", "4", "--images", "3", "--size", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(manifest.exists());

    let o = irispad(&["quality", "--manifest", s(&manifest), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("quality_report.json")).unwrap()).unwrap();
    assert!(q.is_object());

    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&run), "--splits", "2", "--test-subjects", "1"];
    args.extend(SMALL_MODEL);
    let o = irispad(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["splits.jsonl", "models/split_01.irispad", "scores/split_02.csv", "run_record_train.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let eval = ["evaluate", "--out", s(&run), "--min-hours", "0", "--min-hours", "16"];
    let o = irispad(&eval);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(run.join("eval_report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["per_split_accuracy"].as_array().unwrap().len(), 2);
    assert!(report["auc"].as_f64().unwrap() >= 0.0);
    assert!(run.join("roc.svg").exists() && run.join("time_horizon.svg").exists());
    // Re-running on the same scores reproduces the report byte for byte.
    let o = irispad(&eval);
    assert!(o.status.success());
    assert_eq!(std::fs::read(run.join("eval_report.json")).unwrap(), first);

    let model = run.join("models/split_01.irispad");
    let expl = dir.path().join("expl");
    let o = irispad(&["explain", "--manifest", s(&manifest), "--out", s(&expl), "--model", s(&model), "--samples", "2", "--layer", "conv4_3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = std::fs::read_dir(&expl).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 8);
}

#[test]
fn missing_manifest_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = irispad(&["train", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));
}

#[test]
fn evaluate_before_train_reports_missing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let o = irispad(&["evaluate", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no scored samples found"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "out = \"x\"\nlearning_rate = 1.0\n").unwrap();
    let o = irispad(&["evaluate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_hyperparameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = irispad(&["train", "--manifest", "m.csv", "--out", s(dir.path()), "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}
