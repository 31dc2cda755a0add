use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ris(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ris"))
        .args(args)
        .output()
        .expect("run ris")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn docs(name: &str) -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs")
        .join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema: &serde_json::Value, doc: &serde_json::Value) {
    let validator = jsonschema::validator_for(schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

const TINY: &str = r#"{
  "model": { "channels": 4, "fcn_kernels": [5, 3] },
  "train": { "max_epochs_per_stage": 1, "precision": "f64", "max_inference_steps": 5 },
  "dataset": {
    "train": 4,
    "test": 2,
    "scene": { "height": 24, "width": 24, "radius_min": 4.0, "radius_max": 6.0, "max_instances": 2 }
  }
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn matchcheck_reports_exact_agreement() {
    let o = ris(&["matchcheck", "--trials", "1000", "--max-size", "7"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("1000/1000 exact"), "{}", stdout(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ris(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("PASS").count(), 2, "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert!(report["network"]["worst_relative"].as_f64().unwrap() < 1e-4);
}

#[test]
fn usage_errors_exit_two() {
    let o = ris(&["matchcheck", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(ris(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ris(&[]).status.code(), Some(2));
    assert_eq!(
        ris(&["matchcheck", "--max-size", "9"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = ris(&[
        "train",
        "--dataset",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent"));
}

#[test]
fn generate_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = tiny_config(root);
    let cfg = config.to_str().unwrap();
    let data = root.join("data");
    let run = root.join("run");
    let eval = root.join("eval");
    let inf = root.join("infer");

    let o = ris(&[
        "generate",
        "--config",
        cfg,
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(data.join("train/manifest.jsonl").is_file());
    assert!(data.join("test/images/000004.pgm").is_file());

    let o = ris(&[
        "train",
        "--config",
        cfg,
        "--seed",
        "5",
        "--dataset",
        data.join("train").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--stage-cap",
        "3",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,stage,loss,lr"));
    assert_eq!(lines.count(), 8);
    assert!(run.join("stage2.ckpt").is_file());
    assert!(run.join("final.ckpt").is_file());
    assert!(run.join("train_report.json").is_file());

    let ckpt = run.join("final.ckpt");
    let o = ris(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data.join("test").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("SBD"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_valid(&docs("metrics_report.schema.json"), &metrics);
    assert_eq!(metrics["aggregate"]["images"], 2);
    assert!(eval.join("metrics.txt").is_file());

    let o = ris(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data.join("test/images/000004.pgm").to_str().unwrap(),
        "--out",
        inf.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let scores: Vec<f64> = fs::read_to_string(inf.join("scores.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(!scores.is_empty() && scores.len() <= 5);
    // every kept step has a mask file and only the last score may fall below 0.5
    let kept = scores.iter().filter(|&&s| s >= 0.5).count();
    assert!(scores[..scores.len() - 1].iter().all(|&s| s >= 0.5));
    for t in 0..scores.len() {
        assert_eq!(
            inf.join(format!("mask_{t}.pgm")).is_file(),
            scores[t] >= 0.5
        );
    }
    assert!(kept <= scores.len());
    assert!(inf.join("composite.ppm").is_file());
    let printed: usize = stdout(&o).trim().parse().unwrap();
    assert!(printed <= kept);
}

#[test]
fn seeded_commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let cfg = config.to_str().unwrap();
    let mut logs = Vec::new();
    let mut manifests = Vec::new();
    for k in 0..2 {
        let data = dir.path().join(format!("data{k}"));
        let run = dir.path().join(format!("run{k}"));
        assert!(ris(&[
            "generate",
            "--config",
            cfg,
            "--seed",
            "8",
            "--out",
            data.to_str().unwrap()
        ])
        .status
        .success());
        let o = ris(&[
            "train",
            "--config",
            cfg,
            "--seed",
            "8",
            "--dataset",
            data.join("train").to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--stage-cap",
            "2",
        ]);
        assert!(o.status.success());
        manifests.push(fs::read(data.join("train/manifest.jsonl")).unwrap());
        manifests.push(fs::read(data.join("train/images/000001.pgm")).unwrap());
        logs.push(fs::read(run.join("loss.csv")).unwrap());
        logs.push(fs::read(run.join("final.ckpt")).unwrap());
    }
    assert_eq!(manifests[0], manifests[2]);
    assert_eq!(manifests[1], manifests[3]);
    assert_eq!(logs[0], logs[2]);
    assert_eq!(logs[1], logs[3]);
}

#[test]
fn config_schema_accepts_defaults_and_example() {
    let schema = docs("config.schema.json");
    assert_valid(&schema, &serde_json::from_str(TINY).unwrap());
    assert_valid(&schema, &serde_json::json!({}));
    let example: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/example_config.json"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_valid(&schema, &example);
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(!validator.is_valid(&serde_json::json!({ "train": { "lerning_rate": 1.0 } })));
}
