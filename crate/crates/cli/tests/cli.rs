use std::path::Path;
use std::process::{Command, Output};

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "household": "small",
        "source": { "kind": "simulate", "scenario": { "sim": { "days": 12 } } },
        "ingest": { "test_days": 2 },
        "tune": { "n_iter": 1, "row_stride": 4, "grid": {
            "boosting_type": ["gbdt"], "max_depth": [5], "learning_rate": [0.1],
            "n_estimators": [20], "num_leaves": [5, 10]
        } },
        "nn": { "units": 4, "seq_len": 8, "epochs": 2, "max_windows": 200 },
        "seed": 7
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn dhwcast(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhwcast"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("DHWCAST_OUT")
        .env_remove("DHWCAST_SEED")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn stages_chain_and_emit_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    for stage in ["simulate", "ingest", "features", "tune", "train", "forecast", "detect", "calendar", "plan", "evaluate"] {
        let stdout = ok(&dhwcast(&[stage], &cfg, &out));
        let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
        assert_eq!(v["stage"], stage);
    }
    let dir = out.join("small").join("gbdt");
    for f in [
        "raw.csv", "truth.csv", "frame.csv", "features.csv", "cv.csv", "model.json", "forecast.csv",
        "forecast.svg", "events.csv", "calendar.json", "calendar.svg", "plan.csv", "metrics.json",
    ] {
        let text = std::fs::read_to_string(dir.join(f)).unwrap();
        assert!(text.contains("run_id"), "{f} lacks a run id");
    }
    let registry = std::fs::read_to_string(out.join("runs.jsonl")).unwrap();
    assert_eq!(registry.lines().count(), 10);

    let rep = ok(&dhwcast(&["report"], &cfg, &out));
    assert!(rep.contains("\"report\""));
    assert!(out.join("report.csv").exists());
}

#[test]
fn out_of_order_stage_names_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = dhwcast(&["detect"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "dependency");
    assert!(err["message"].as_str().unwrap().contains("forecast.csv"));
}

#[test]
fn bad_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{ "source": { "kind": "csv", "path": "/no/such/file.csv" } }"#).unwrap();
    let o = dhwcast(&["ingest"], &p, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn rerun_reproduces_metrics_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&dhwcast(&["run"], &cfg, &a));
    ok(&dhwcast(&["run", "--sequential"], &cfg, &b));
    for f in ["metrics.json", "calendar.json", "plan.csv", "events.csv"] {
        let x = std::fs::read(a.join("small/gbdt").join(f)).unwrap();
        let y = std::fs::read(b.join("small/gbdt").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn neural_model_trains_and_plots_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    ok(&dhwcast(&["run", "--model", "lstm"], &cfg, &out));
    let curve = std::fs::read_to_string(out.join("small/lstm/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert!(out.join("small/lstm/loss_curve.svg").exists());
}

#[test]
fn seed_flag_changes_run_id() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    let a: serde_json::Value = serde_json::from_str(ok(&dhwcast(&["config"], &cfg, &out)).trim()).unwrap();
    let b: serde_json::Value = serde_json::from_str(ok(&dhwcast(&["config", "--seed", "8"], &cfg, &out)).trim()).unwrap();
    assert_eq!(a["seed"], 7);
    assert_eq!(b["seed"], 8);
    assert_eq!(b["source"]["scenario"]["sim"]["seed"], 8);
}
