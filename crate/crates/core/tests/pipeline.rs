use std::path::Path;

use dhwcast::gbdt::{BoostingType, ParamGrid};
use dhwcast::pipeline::{run_in_memory, ForecastMode, Metrics, PipelineConfig, Stage, Workspace};

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed: 11, out: out.to_path_buf(), ..PipelineConfig::default() };
    if let dhwcast::pipeline::DataSource::Simulate { scenario } = &mut cfg.source {
        scenario.sim.days = 14;
    }
    cfg.ingest.test_days = Some(3);
    cfg.tune.n_iter = 1;
    cfg.tune.grid = ParamGrid {
        boosting_type: vec![BoostingType::Gbdt, BoostingType::Dart],
        max_depth: vec![4, 6],
        learning_rate: vec![0.1, 0.2],
        n_estimators: vec![15, 25],
        num_leaves: vec![5, 10],
        ..ParamGrid::default()
    };
    cfg
}

fn body(ws: &Workspace, name: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.path(name)).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("run_id");
    v
}

#[test]
fn singleton_search_equals_training_with_the_sampled_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("tuned"));
    let tuned = Workspace::new(&cfg).unwrap();
    for s in [Stage::Simulate, Stage::Ingest, Stage::Features, Stage::Tune, Stage::Train] {
        tuned.run(s).unwrap();
    }
    let best: dhwcast::gbdt::GbdtParams = serde_json::from_value(body(&tuned, "tuned.json")["params"].clone()).unwrap();

    let mut direct_cfg = small(&tmp.path().join("direct"));
    direct_cfg.tune.enabled = false;
    direct_cfg.gbdt = best;
    let direct = Workspace::new(&direct_cfg).unwrap();
    let stages = direct.plan_stages();
    assert!(!stages.contains(&Stage::Tune));
    for s in [Stage::Simulate, Stage::Ingest, Stage::Features, Stage::Train] {
        direct.run(s).unwrap();
    }
    assert_eq!(body(&tuned, "model.json"), body(&direct, "model.json"));
}

#[test]
fn in_memory_run_matches_the_workspace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let mem = run_in_memory(&cfg).unwrap();
    let ws = Workspace::new(&cfg).unwrap();
    ws.run_all().unwrap();
    let on_disk: Metrics = serde_json::from_value(body(&ws, "metrics.json")).unwrap();
    assert_eq!(serde_json::to_value(&mem.metrics).unwrap(), serde_json::to_value(&on_disk).unwrap());
}

#[test]
fn recursive_rollout_rewrites_only_the_test_window() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.tune.enabled = false;
    let one = run_in_memory(&cfg).unwrap();
    cfg.forecast.mode = ForecastMode::Recursive;
    let rec = run_in_memory(&cfg).unwrap();
    assert_eq!(rec.metrics.forecast_mode, ForecastMode::Recursive);
    assert_eq!(one.forecast.timestamps, rec.forecast.timestamps);
    // Rollout only replaces the test segment.
    let (_, _, a) = one.forecast.segment(false);
    let (_, _, b) = rec.forecast.segment(false);
    assert_eq!(a, b);
    assert!(rec.metrics.forecast.rmse.is_finite());
    let (_, _, c) = one.forecast.segment(true);
    let (_, _, d) = rec.forecast.segment(true);
    assert_ne!(c, d);
}

#[test]
fn registry_grows_by_one_line_per_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.tune.enabled = false;
    let ws = Workspace::new(&cfg).unwrap();
    let n = ws.run_all().unwrap().len();
    let recs = dhwcast::pipeline::read_registry(tmp.path()).unwrap();
    assert_eq!(recs.len(), n);
    assert!(recs.iter().all(|r| r.run_id == ws.run_id));
    ws.run(Stage::Evaluate).unwrap();
    assert_eq!(dhwcast::pipeline::read_registry(tmp.path()).unwrap().len(), n + 1);
}
