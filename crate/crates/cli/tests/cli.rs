use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn leukopipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leukopipe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_config(root: &Path, epochs: usize) -> PathBuf {
    let data = root.join("toy");
    let o = leukopipe(&["synth", "--out", data.to_str().unwrap(), "--per-class", "30", "--side", "32", "--seed", "5"]);
    assert!(o.status.success(), "{o:?}");
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"[run]
seed = 5
out_dir = "run"
workers = 2

[data]
sources = ["toy"]

[balance]
target_m = 26

[model]
arch = "tiny_cnn"
pretrained = false

[train]
batch_size = 8
learning_rate = 0.001
max_epochs = {epochs}
early_stop_patience = {epochs}
"#
        ),
    )
    .unwrap();
    cfg
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn stage_subset_writes_split_manifest_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let o = leukopipe(&["run", "--config", cfg.to_str().unwrap(), "--stages", "ingest,split"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    assert!(run.join("manifest/split.jsonl").is_file());
    assert!(run.join("config.resolved").is_file());
    assert!(fs::read_dir(run.join("checkpoints")).unwrap().next().is_none());

    let again = leukopipe(&["run", "--config", cfg.to_str().unwrap(), "--stages", "ingest,split"]);
    assert!(stdout(&again).contains("ingest: skipped"));
}

#[test]
fn train_without_balanced_manifest_is_a_prereq_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let o = leukopipe(&["run", "--config", cfg.to_str().unwrap(), "--stages", "train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("balanced.jsonl"));
}

#[test]
fn bad_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\narch = \"vgg16\"\n").unwrap();
    let o = leukopipe(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_toy_run_is_consistent_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 2);
    let o = leukopipe(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    for artifact in [
        "config.resolved",
        "manifest/balanced.jsonl",
        "checkpoints/best/model.safetensors",
        "checkpoints/best/model.json",
        "logs/train_log.json",
        "reports/predictions.jsonl",
        "reports/metrics.json",
        "reports/metrics.csv",
        "reports/metrics.md",
        "reports/comparison.md",
    ] {
        assert!(run.join(artifact).is_file(), "missing {artifact}");
    }

    // Recount the emitted predictions by hand and compare with metrics.json.
    let mut correct = 0usize;
    let mut n = 0usize;
    for line in fs::read_to_string(run.join("reports/predictions.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let truth = v["label"].as_str().unwrap();
        let guess = if v["p_all"].as_f64().unwrap() >= 0.5 { "ALL" } else { "HEM" };
        correct += usize::from(truth == guess);
        n += 1;
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("reports/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"].as_u64().unwrap() as usize, n);
    assert_eq!(metrics["accuracy"].as_f64().unwrap(), correct as f64 / n as f64);

    let eval = leukopipe(&["eval", "--predictions", run.join("reports/predictions.jsonl").to_str().unwrap()]);
    let from_file: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(from_file, metrics);

    let before = snapshot(&run);
    let again = leukopipe(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(again.status.success());
    assert_eq!(stdout(&again).matches("skipped").count(), 7);
    assert_eq!(snapshot(&run), before);

    let report = leukopipe(&["report", "--run", run.to_str().unwrap(), "--compare", "--format", "csv"]);
    let text = stdout(&report);
    assert!(text.starts_with("model,accuracy,precision,recall,f1,auc"));
    assert!(text.contains("TinyCNN (run)"));
    assert!(text.contains("VGG16 (from scratch),Train a VGG16 architecture from scratch,92.60,LITERATURE"));
}

#[test]
fn checkpoint_eval_matches_pipeline_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    assert!(leukopipe(&["run", "--config", cfg.to_str().unwrap(), "--stages", "ingest,split,carve-val,augment,train,eval"])
        .status
        .success());
    let run = tmp.path().join("run");
    let out = tmp.path().join("preds.jsonl");
    let o = leukopipe(&[
        "eval",
        "--checkpoint",
        run.join("checkpoints/best").to_str().unwrap(),
        "--manifest",
        run.join("manifest/balanced.jsonl").to_str().unwrap(),
        "--write-predictions",
        out.to_str().unwrap(),
        "--batch-size",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out).unwrap(), fs::read(run.join("reports/predictions.jsonl")).unwrap());
}
