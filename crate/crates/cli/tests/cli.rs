use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
kind = "homogeneous"
train_samples = 16
val_samples = 4

[model]
dim = 8
heads = 2

[optim]
lr = 1e-2
steps = 6
batch_size = 4
log_every = 2
"#;

fn tokenfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenfusion")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let run = dir.path().join("run");
    let run_s = run.display().to_string();

    let summary = json(&tokenfusion(&["train", "--config", &cfg, "--out", &run_s]));
    assert_eq!(summary["steps"], 6);
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    // steps 2, 4 and 6
    assert_eq!(lines.lines().count(), 3);
    assert!(run.join("final.json").is_file());

    let eval = json(&tokenfusion(&["eval", "--ckpt", &run_s, "--split", "val"]));
    assert_eq!(eval["samples"], 4);
    assert_eq!(eval, summary["val"]);

    let masks = dir.path().join("masks").display().to_string();
    let report = json(&tokenfusion(&["export-masks", "--ckpt", &run_s, "--sample", "1", "--layers", "1,2", "--out", &masks, "--scale", "2"]));
    let files = report["files"].as_array().unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        let bytes = std::fs::read(f.as_str().unwrap()).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 64);
    }

    let more = write_config(dir.path(), "more.toml", &TINY.replace("steps = 6", "steps = 8"));
    let resumed = json(&tokenfusion(&["train", "--config", &more, "--out", &run_s, "--resume", &run_s]));
    assert_eq!(resumed["steps"], 8);
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let data = dir.path().join("data");
    let out = tokenfusion(&["gen-data", "--config", &cfg, "--out", &data.display().to_string()]);
    assert!(out.status.success());
    assert!(data.join("manifest.json").is_file());

    let with_path = TINY.replace("[model]", "[paths]\ndata = \"data\"\n\n[model]");
    let cfg = write_config(dir.path(), "from_disk.toml", &with_path);
    let run = dir.path().join("run").display().to_string();
    json(&tokenfusion(&["train", "--config", &cfg, "--out", &run]));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &TINY.replace("[model]", "[model]\nwidth = 3"));
    let out = tokenfusion(&["train", "--config", &bad, "--out", &dir.path().join("x").display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));

    let heads = write_config(dir.path(), "heads.toml", &TINY.replace("heads = 2", "heads = 3"));
    assert_eq!(tokenfusion(&["grad-check", "--config", &heads]).status.code(), Some(2));

    let missing = dir.path().join("nothing").display().to_string();
    assert_eq!(tokenfusion(&["eval", "--ckpt", &missing]).status.code(), Some(1));
    assert_eq!(tokenfusion(&["export-masks", "--ckpt", &missing, "--sample", "0"]).status.code(), Some(2));
}

#[test]
fn grad_check_reports_and_fails_below_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let report = json(&tokenfusion(&["grad-check", "--config", &cfg]));
    assert!(report["worst"].as_f64().unwrap() < 1e-4);
    let out = tokenfusion(&["grad-check", "--config", &cfg, "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["homogeneous.toml", "heterogeneous.toml"] {
        let cfg = tokenfusion::harness::ExperimentConfig::from_file(&root.join(name)).unwrap();
        assert_eq!(cfg.optim.steps, 2000, "{name}");
    }
}
