use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use synthbalance::report::parse_classifier_history;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_synthbalance"));
    c.env_remove("SYNTHBALANCE_OUTPUT_ROOT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path, skip: &[&str]) {
    let fa = files(a);
    let fb = files(b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a).unwrap(), y.strip_prefix(b).unwrap());
        let name = x.file_name().unwrap().to_str().unwrap();
        if skip.contains(&name) {
            continue;
        }
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
}

const SMALL: &[&str] = &["--resolution", "32", "--gen-epochs", "3", "--clf-epochs", "2"];

fn small(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

fn synth(dir: &Path, pos: &str, neg: &str, out: &str) {
    run(dir, &["synth", "--positive", pos, "--negative", neg, "--size", "32", "--out", out]);
}

#[test]
fn synth_then_ingest_recovers_counts() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "50", "50", "data");
    run(tmp.path(), &["ingest", "data", "--out", "ing"]);
    let summary = json(&tmp.path().join("ing/ingest.json"));
    let counts: Vec<u64> = summary["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["count"].as_u64().unwrap())
        .collect();
    assert_eq!(counts, vec![50, 50]);
    assert!(tmp.path().join("ing/config.json").exists());

    synth(tmp.path(), "50", "50", "again");
    assert_same_tree(&tmp.path().join("data"), &tmp.path().join("again"), &[]);
}

#[test]
fn empty_synth_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["synth", "--positive", "0", "--negative", "0", "--out", "empty"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn ingest_errors_and_partial_failures() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let out = bin().current_dir(tmp.path()).args(["ingest", "empty"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    synth(tmp.path(), "5", "5", "data");
    fs::write(tmp.path().join("data/negative/broken.pgm"), b"P5\n9 9\n255\n").unwrap();
    let out = run(tmp.path(), &["ingest", "data", "--out", "ing"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.pgm"));
    let summary = json(&tmp.path().join("ing/ingest.json"));
    assert_eq!(summary["warnings"].as_array().unwrap().len(), 1);
    assert_eq!(summary["classes"][0]["count"], 5);
}

#[test]
fn staged_commands_chain_and_repeat_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "12", "6", "data");
    let before = files(&dir.join("data"));
    for pass in ["a", "b"] {
        let root = "r";
        let with_root = |cmd: &'static str, extra: &[&'static str]| {
            let mut args = vec![cmd, "--data", "data", "--output-root", root];
            args.extend(small(extra));
            run(dir, &args);
        };
        with_root("train-gen", &[]);
        with_root("balance", &["--target", "20"]);
        run(
            dir,
            &[&["train-clf", "--output-root", root, "--validation-dir"], &[&*format!("{root}/balance/test")][..], SMALL]
                .concat(),
        );
        run(dir, &[&["eval", "--output-root", root, "--positive-class", "positive"], SMALL].concat());
        fs::rename(dir.join(root), dir.join(pass)).unwrap();
    }
    assert_eq!(files(&dir.join("data")), before);
    assert_same_tree(&dir.join("a"), &dir.join("b"), &[]);

    let gen = dir.join("a/train-gen");
    let ckpts: Vec<_> = files(&gen)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 2);
    assert!(gen.join("config.json").exists());

    let manifest = json(&dir.join("a/balance/manifest.json"));
    assert_eq!(manifest["real_counts"], serde_json::json!([4, 8]));
    assert_eq!(manifest["synthetic_counts"], serde_json::json!([16, 12]));
    let train_entries = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["split"] == "train")
        .count();
    assert_eq!(train_entries, 40);

    let history = fs::read_to_string(dir.join("a/train-clf/history.csv")).unwrap();
    let parsed = parse_classifier_history(&history).unwrap();
    assert_eq!(parsed.len(), 2);
    assert!(parsed.iter().all(|e| e.val_accuracy.is_some()));

    let metrics = json(&dir.join("a/eval/metrics.json"));
    for key in ["accuracy", "precision", "recall", "f1"] {
        assert!(metrics[key].is_f64(), "{key}");
    }
    let c = &metrics["confusion"];
    let total: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 6);
    assert!(fs::read_to_string(dir.join("a/eval/metrics.txt")).unwrap().contains("normalized"));
}

#[test]
fn no_op_balance_generates_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "6", "6", "data");
    // Four training images per class, so target 4 needs no generator at all.
    run(
        tmp.path(),
        &["balance", "--data", "data", "--resolution", "32", "--target", "4", "--out", "bal"],
    );
    let manifest = json(&tmp.path().join("bal/manifest.json"));
    assert_eq!(manifest["synthetic_counts"], serde_json::json!([0, 0]));
    assert!(manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .all(|f| f["origin"]["kind"] == "real"));
}

#[test]
fn config_file_flags_and_environment_root() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "6", "6", "data");
    fs::write(
        tmp.path().join("run.json"),
        r#"{"resolution": 32, "generator": {"epochs": 5}, "data": {"kind": "directory", "path": "data"}}"#,
    )
    .unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .env("SYNTHBALANCE_OUTPUT_ROOT", "envroot")
        .args(["train-gen", "--config", "run.json", "--gen-epochs", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("envroot/train-gen");
    let history = fs::read_to_string(dir.join("positive_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let resolved = json(&dir.join("config.json"));
    assert_eq!(resolved["generator"]["epochs"], 2);
    assert_eq!(resolved["output_dir"], "envroot");

    // The resolved file alone reproduces the run.
    run(tmp.path(), &["train-gen", "--config", "envroot/train-gen/config.json", "--out", "replay"]);
    assert_same_tree(&dir, &tmp.path().join("replay"), &[]);
}

#[test]
fn experiment_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "8", "4", "data");
    for out in ["e1", "e2"] {
        let mut args = vec!["experiment", "--data", "data", "--out", out, "--target", "8", "--seeds", "0,1"];
        args.extend(small(&["--sweep-targets", "6,8,10"]));
        run(tmp.path(), &args);
    }
    let e1 = tmp.path().join("e1");
    assert_same_tree(&e1, &tmp.path().join("e2"), &["timing.json", "timing.txt"]);

    let summary = json(&e1.join("summary.json"));
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    assert_eq!(runs[0]["test_hash"], runs[1]["test_hash"]);
    let timing = json(&e1.join("timing.json"));
    assert_eq!(timing.as_array().unwrap().len(), 4);
    let timing_rows = fs::read_to_string(e1.join("timing.txt")).unwrap();
    assert_eq!(timing_rows.lines().count(), 3);
    let sweep = json(&e1.join("sweep.json"));
    assert_eq!(sweep["means"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["eval", "--checkpoint", "missing.ckpt", "--test-dir", "nowhere"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}
