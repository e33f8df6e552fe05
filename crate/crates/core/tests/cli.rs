use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ivx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivx"))
        .current_dir(dir)
        .env_remove("IVX_SEED")
        .args(args)
        .output()
        .expect("ivx binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ivx(dir, args);
    assert!(out.status.success(), "ivx {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "synth", "--out", "corpus", "--speakers", "6", "--utts-per-speaker", "4", "--test-utts", "1",
            "--ubm-speakers", "4", "--ubm-utts", "2", "--duration", "1", "--channels", "1",
        ],
    );
}

#[test]
fn staged_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let m = "corpus/manifest.csv";
    ok(d, &["features", "--in", m, "--out", "feats"]);
    ok(d, &["train-ubm", "--features", "feats", "--components", "4", "--max-iters", "5", "--out", "m/ubm.ivxg"]);
    ok(d, &["train-tv", "--ubm", "m/ubm.ivxg", "--features", "feats", "--rank", "6", "--iters", "2", "--out", "m/tv.ivxt"]);
    for split in ["train", "test"] {
        let out = format!("m/{split}.ivxv");
        ok(d, &["extract", "--tv", "m/tv.ivxt", "--features", "feats", "--labels", m, "--split", split, "--out", &out]);
    }
    ok(d, &["train-sae", "--ivecs", "m/train.ivxv", "--layers", "4,2", "--epochs", "5", "--pretrain-epochs", "5", "--out", "m/sae.ivxa"]);
    ok(d, &["encode", "--sae", "m/sae.ivxa", "--ivecs", "m/train.ivxv", "--out", "m/train.codes"]);
    ok(d, &["encode", "--sae", "m/sae.ivxa", "--ivecs", "m/test.ivxv", "--out", "m/test.codes"]);
    ok(d, &["train-clf", "--kind", "svm", "--codes", "m/train.codes", "--labels", m, "--target", "gender", "--out", "m/clf.bin"]);
    ok(d, &["predict", "--clf", "m/clf.bin", "--codes", "m/test.codes", "--out", "m/pred.csv"]);
    ok(d, &["evaluate", "--pred", "m/pred.csv", "--truth", m, "--task", "binary", "--out", "m/eval.json"]);
    ok(d, &["baseline", "--ivecs", "m/train.ivxv", "--labels", m, "--test", "m/test.ivxv", "--report", "m/base.json"]);

    let pred = fs::read_to_string(d.join("m/pred.csv")).unwrap();
    assert_eq!(pred.lines().count(), 7);
    assert!(pred.starts_with("utterance_id,predicted,"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], 6);
    let auc = eval["binary"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(d.join("m/base.json").exists());
}

const RUN_TOML: &str = r#"
manifest = "corpus/manifest.csv"
target = "gender"

[ubm]
components = 4
max_iters = 5

[tv]
rank = 6
iters = 2

[sae]
layers = [4, 2]

[sae.train]
epochs = 5
pretrain_epochs = 5

[classifier]
kind = "svm"
"#;

#[test]
fn run_caches_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    fs::write(d.join("run.toml"), RUN_TOML).unwrap();
    ok(d, &["run", "--config", "run.toml", "--workdir", "w"]);
    let first: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("w/run.json")).unwrap()).unwrap();
    let report = fs::read(d.join("w/report.json")).unwrap();

    ok(d, &["run", "--config", "run.toml", "--workdir", "w"]);
    let second: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("w/run.json")).unwrap()).unwrap();
    let stages = second["stages"].as_array().unwrap();
    assert!(!stages.is_empty());
    assert!(stages.iter().all(|s| s["cached"] == true), "{stages:?}");
    assert!(first["stages"].as_array().unwrap().iter().all(|s| s["cached"] == false));
    assert_eq!(fs::read(d.join("w/report.json")).unwrap(), report);
    assert!(!d.join("w/.ivx.lock").exists());
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[ubm]\ncomponentz = 4\n").unwrap();
    let out = ivx(d, &["run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    fs::write(d.join("rank.toml"), "manifest = \"m.csv\"\n[ubm]\ncomponents = 2\n[tv]\nrank = 1000\n").unwrap();
    assert_eq!(ivx(d, &["run", "--config", "rank.toml"]).status.code(), Some(2));

    let out = ivx(d, &["train-ubm", "--features", "missing", "--out", "u.ivxg"]);
    assert_eq!(out.status.code(), Some(3));
    let out = ivx(d, &["evaluate", "--pred", "nope.csv", "--truth", "nope.csv", "--task", "binary", "--out", "e.json"]);
    assert_eq!(out.status.code(), Some(3));
}
