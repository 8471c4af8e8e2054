use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn l2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2p"))
        .args(args)
        .env_remove("L2P_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synthetic(dir: &Path) -> String {
    let path = dir.join("g.json");
    let out = l2p(&[
        "make-synthetic",
        "--preset",
        "two-block",
        "--seed",
        "1",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

const QUICK: &[&str] = &["--epochs", "5", "--depth", "3", "--hidden", "8", "--repr-dim", "8"];

#[test]
fn run_writes_reports_for_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let g = synthetic(dir.path());
    let out_dir = dir.path().join("out");
    let mut args = vec![
        "run",
        "--dataset",
        &g,
        "--seed",
        "3,4",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend(QUICK);
    let out = l2p(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = metrics["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![3, 4]);
    assert_eq!(metrics["config"]["depth"], 3);
    assert!(out_dir.join("timing.json").exists());
    assert!(out_dir.join("history_seed3.jsonl").exists());
    assert!(!fs::read_to_string(out_dir.join("metrics.json"))
        .unwrap()
        .contains("seconds"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = synthetic(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(r#"{{"dataset": "{g}", "depth": 7, "epochs": 5, "seed": 9, "hidden": 8, "repr_dim": 8}}"#),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = l2p(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--depth",
        "2",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["depth"], 2);
    assert_eq!(metrics["config"]["seeds"], serde_json::json!([9]));
}

#[test]
fn sweep_export_and_correlate() {
    let dir = tempfile::tempdir().unwrap();
    let g = synthetic(dir.path());
    let mut args = vec!["sweep", "--dataset", &g, "--depths", "1,2"];
    args.extend(QUICK);
    let out = l2p(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("K,mean,std"));
    assert_eq!(csv.lines().count(), 3);

    let mut paths = Vec::new();
    for (name, head) in [("l2s", "l2s"), ("l2q", "l2q")] {
        let p = dir.path().join(format!("{name}.csv"));
        let mut args = vec![
            "export-posteriors",
            "--dataset",
            &g,
            "--head",
            head,
            "--out",
            p.to_str().unwrap(),
        ];
        args.extend(QUICK);
        let out = l2p(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        paths.push(p.to_str().unwrap().to_string());
    }
    let out = l2p(&["correlate", &paths[0], &paths[1]]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("l2s"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn grad_check_passes_and_fails_by_tolerance() {
    assert_eq!(code(&l2p(&["grad-check", "--seeds", "2"])), 0);
    assert_eq!(code(&l2p(&["grad-check", "--seeds", "1", "--tolerance", "0"])), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"depht": 3}"#).unwrap();
    assert_eq!(code(&l2p(&["run", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&l2p(&["run"])), 2);
    assert_eq!(code(&l2p(&["run", "--synthetic", "two-block", "--alpha", "1.5"])), 2);
    assert_eq!(code(&l2p(&["run", "--bogus-flag"])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_l2p"))
        .args(["grad-check", "--seeds", "1"])
        .env("L2P_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn dataset_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&l2p(&["run", "--dataset", missing.to_str().unwrap()])), 3);
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    assert_eq!(code(&l2p(&["run", "--dataset", broken.to_str().unwrap()])), 3);
}
