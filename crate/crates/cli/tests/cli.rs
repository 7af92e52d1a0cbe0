use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unidense"));
    c.env_remove("UNIDENSE_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn unidense")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--dry-run", "--set", "model.depth=3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.depth"), "{}", stderr(&o));
}

#[test]
fn dry_run_echoes_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--dry-run", "--seed", "5", "--set", "model.width=32", "--set", "model.heads=2", "--stages", "1,2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["model"]["width"], 32);
    assert_eq!(v["stages"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_model_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--dry-run", "--set", "model.heads=3"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_file_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[model]\nwidht = 32\n").unwrap();
    let o = run(&["train", "--dry-run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.widht"), "{}", stderr(&o));
}

#[test]
fn empty_sweep_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--widths", ""], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn injected_fault_names_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["selfcheck", "--inject", "dice-grad-sign"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seg.dice"), "{}", stderr(&o));
}

#[test]
fn gen_train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--set", "scenes=20", "--set", "val_percent=25"], &data);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(data.join("manifest.json").exists());

    let run_dir = dir.path().join("run");
    let o = run(
        &[
            "train", "--toy", "--data", data.to_str().unwrap(), "--stages", "1",
            "--set", "stages.0.steps=2", "--set", "stages.0.batch_size=2", "--set", "model.upsample_factor=2",
        ],
        &run_dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run_dir.join("checkpoint.ckpt").exists());
    assert!(run_dir.join("train_log.csv").exists());
    assert!(run_dir.join("run_manifest.json").exists());

    let val = data.join("val");
    let inf = dir.path().join("infer");
    let o = run(
        &["infer", "--checkpoint", run_dir.join("checkpoint.ckpt").to_str().unwrap(), "--data", val.to_str().unwrap(), "--k", "2", "--max-instances", "3", "--overlays"],
        &inf,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pred = inf.join("pred.jsonl");
    assert!(pred.exists());

    let ev = dir.path().join("eval");
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", val.join("gt.jsonl").to_str().unwrap(), "--pass-at-k", "2"], &ev);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report.get("all").is_some());
}

#[test]
fn eval_with_orphan_prediction_fails() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&gt, "{\"image_id\":\"a\",\"phrase\":\"circle\",\"instances\":[]}\n").unwrap();
    std::fs::write(&pred, "{\"image_id\":\"b\",\"phrase\":\"circle\",\"instances\":[]}\n").unwrap();
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()], dir.path());
    assert_ne!(o.status.code(), Some(0));
}
