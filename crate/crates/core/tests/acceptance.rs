//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The pipeline criteria (5, 6, 8, 10) share one set of full runs over seeds
//! 42..=45, so the suite costs roughly four tuned boosting runs, four toy
//! LSTM runs and one repeat run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chrono::{Datelike, TimeDelta, TimeZone, Utc};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dhwcast::calendar::aggregate;
use dhwcast::gbdt::{gbdt_fit, GbdtModel, GbdtParams, TreeNode};
use dhwcast::iforest::{anomaly_score, c_factor, ForestParams, IsoTree, IsolationForest};
use dhwcast::ingest::{chronological_split, resample_forward_fill, RawReading, SplitSpec};
use dhwcast::metrics::wilcoxon_exact;
use dhwcast::neuralnet::{grad_check, ModelKind, SequenceModel};
use dhwcast::pipeline::{Metrics, ModelName, PipelineConfig, Workspace};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    // Independent evaluation of the normalizer.
    let direct = |n: usize| -> f64 {
        match n {
            1 => 0.0,
            2 => 1.0,
            _ => {
                let harmonic = ((n - 1) as f64).ln() + 0.5772156649;
                2.0 * harmonic - 2.0 * (n - 1) as f64 / n as f64
            }
        }
    };
    for n in [1, 2, 10, 256] {
        let got = c_factor(n).map_err(|e| e.to_string())?;
        ensure!((got - direct(n)).abs() <= 1e-12, "c({n}) = {got}, expected {}", direct(n));
    }
    let c10 = direct(10);
    ensure!((c10 - 3.748880484472439).abs() < 1e-12, "c(10) drifted: {c10}");

    // A leaf holding psi points contributes exactly c(psi); a leaf with one
    // point contributes nothing.
    let forest = |leaf: usize, psi: usize| IsolationForest {
        params: ForestParams { n_trees: 3, psi, seed: 0 },
        width: 1,
        sample_size: psi,
        trees: vec![IsoTree::single(leaf); 3],
    };
    for psi in [2, 10, 256] {
        let half = anomaly_score(&forest(psi, psi), &[0.0]).map_err(|e| e.to_string())?;
        ensure!((half - 0.5).abs() <= 1e-12, "E(h)=c(n) scored {half} at n={psi}");
        let one = anomaly_score(&forest(1, psi), &[0.0]).map_err(|e| e.to_string())?;
        ensure!((one - 1.0).abs() <= 1e-12, "E(h)=0 scored {one} at n={psi}");
    }
    Ok("c(n) exact for n in {1,2,10,256}; s=0.5 and s=1.0 at the anchors".into())
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (input, hidden, len) = (3, 4, 5);
    let batch: Vec<(Vec<Vec<f64>>, f64)> = (0..3)
        .map(|_| {
            let seq = (0..len).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            (seq, rng.random_range(-1.0..1.0))
        })
        .collect();
    let mut lines = Vec::new();
    for kind in [ModelKind::Lstm, ModelKind::Bilstm, ModelKind::Attlstm] {
        let model = SequenceModel::new(kind, input, hidden, 11);
        let clean = grad_check(&model, &batch, 1e-5, false).map_err(|e| e.to_string())?;
        ensure!(
            clean.max_relative_error < 1e-4,
            "{kind:?}: max relative error {:.3e} in {}",
            clean.max_relative_error,
            clean.worst_tensor
        );
        let broken = grad_check(&model, &batch, 1e-5, true).map_err(|e| e.to_string())?;
        ensure!(
            broken.max_relative_error > 1e-1,
            "{kind:?}: corrupted gradient went unnoticed ({:.3e})",
            broken.max_relative_error
        );
        lines.push(format!("{kind:?} {:.1e}/{:.2}", clean.max_relative_error, broken.max_relative_error));
    }
    Ok(format!("clean/corrupted: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 3

struct Stump {
    feature: usize,
    threshold: f64,
    left: Vec<bool>,
    left_value: f64,
    right_value: f64,
}

/// Exhaustive search over every feature and every gap between consecutive
/// distinct values; first strict improvement wins.
fn best_stump(x: &[f64], width: usize, r: &[f64]) -> Stump {
    let n = r.len();
    let mut best: Option<(f64, Stump)> = None;
    for f in 0..width {
        let mut vals: Vec<f64> = (0..n).map(|i| x[i * width + f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let left: Vec<bool> = (0..n).map(|i| x[i * width + f] <= t).collect();
            let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                if left[i] {
                    sl += r[i];
                    nl += 1.0;
                } else {
                    sr += r[i];
                    nr += 1.0;
                }
            }
            let (ml, mr) = (sl / nl, sr / nr);
            let sse: f64 = (0..n).map(|i| (r[i] - if left[i] { ml } else { mr }).powi(2)).sum();
            if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-12) {
                best = Some((sse, Stump { feature: f, threshold: t, left, left_value: ml, right_value: mr }));
            }
        }
    }
    best.expect("at least one split").1
}

fn criterion_3() -> Outcome {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(20..=200);
        let width = rng.random_range(1..=4);
        let x: Vec<f64> = (0..n * width)
            .map(|i| {
                // One coarse column produces repeated values.
                let v: f64 = rng.random_range(-5.0..5.0);
                if i % width == 0 { v.round() } else { v }
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[i * width].sin() + x[i * width + width - 1] + rng.random_range(-0.5..0.5))
            .collect();
        let params = GbdtParams {
            n_estimators: 1,
            learning_rate: 1.0,
            num_leaves: 2,
            min_samples_leaf: 1,
            ..GbdtParams::default()
        };
        let model = gbdt_fit(&x, width, &y, &params).map_err(|e| e.to_string())?;
        let mean = y.iter().sum::<f64>() / n as f64;
        let resid: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let oracle = best_stump(&x, width, &resid);
        ensure!(model.trees.len() == 1, "seed {seed}: {} trees", model.trees.len());
        let TreeNode::Split { feature, threshold, left, right } = &model.trees[0].tree else {
            return Err(format!("seed {seed}: tree is a single leaf"));
        };
        ensure!(*feature == oracle.feature, "seed {seed}: feature {feature} vs oracle {}", oracle.feature);
        ensure!(
            (threshold - oracle.threshold).abs() < 1e-12,
            "seed {seed}: threshold {threshold} vs oracle {}",
            oracle.threshold
        );
        for i in 0..n {
            ensure!(
                (x[i * width + feature] <= *threshold) == oracle.left[i],
                "seed {seed}: row {i} on the wrong side"
            );
        }
        let leaf = |t: &TreeNode| match t {
            TreeNode::Leaf { value } => Some(*value),
            _ => None,
        };
        let (lv, rv) = (leaf(left).ok_or("left child not a leaf")?, leaf(right).ok_or("right child not a leaf")?);
        let w = model.trees[0].weight;
        ensure!(
            (w * lv - oracle.left_value).abs() < 1e-9 && (w * rv - oracle.right_value).abs() < 1e-9,
            "seed {seed}: leaf values differ from the oracle"
        );
    }

    // Training error along the boosting path.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 400;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = (0..n).map(|i| x[i * 3] * x[i * 3 + 1] + (x[i * 3 + 2]).cos() + rng.random_range(-0.2..0.2)).collect();
    let params = GbdtParams { n_estimators: 60, num_leaves: 8, min_samples_leaf: 5, ..GbdtParams::default() };
    let model = gbdt_fit(&x, 3, &y, &params).map_err(|e| e.to_string())?;
    let mut prev = f64::INFINITY;
    for k in 0..=model.trees.len() {
        let part = GbdtModel { trees: model.trees[..k].to_vec(), ..model.clone() };
        let pred = part.predict(&x, 3).map_err(|e| e.to_string())?;
        let r = (pred.iter().zip(&y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / n as f64).sqrt();
        ensure!(r <= prev + 1e-12, "training RMSE rose at round {k}: {r} > {prev}");
        prev = r;
    }
    Ok(format!("10/10 stumps match the exhaustive oracle; RMSE monotone over 60 rounds (final {prev:.4})"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let a = [0.40, 0.52, 0.31, 0.77, 0.45, 0.60];
    let b = [0.45, 0.60, 0.33, 0.90, 0.47, 0.71];
    let w = wilcoxon_exact(&a, &b).map_err(|e| e.to_string())?;
    ensure!(w.n == 6 && w.statistic == 0.0, "n={} W={}", w.n, w.statistic);
    ensure!((w.p_value - 0.03125).abs() < 1e-12, "p = {}", w.p_value);
    ensure!((w.p_value - 0.0312).abs() < 1e-4, "p = {} does not round to 0.0312", w.p_value);
    Ok(format!("p = {}", w.p_value))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    // 2023-11-04 is a Saturday; four whole weeks from there.
    let start = Utc.with_ymd_and_hms(2023, 11, 4, 0, 0, 0).unwrap();
    let end = start + TimeDelta::days(28);
    let events = [
        start + TimeDelta::hours(14) + TimeDelta::minutes(5),
        start + TimeDelta::days(14) + TimeDelta::hours(14) + TimeDelta::minutes(40),
    ];
    ensure!(events.iter().all(|e| e.weekday() == chrono::Weekday::Sat), "fixture is not on Saturdays");
    let cal = aggregate(&events, start, end).map_err(|e| e.to_string())?;
    let sat = chrono::Weekday::Sat.num_days_from_monday() as usize;
    ensure!(cal.support[sat][14] == 4, "support {}", cal.support[sat][14]);
    ensure!(cal.probability[sat][14] == 0.5, "Saturday 14:00 = {}", cal.probability[sat][14]);
    for w in 0..7 {
        if w == sat {
            continue;
        }
        ensure!(cal.probability[w].iter().all(|p| *p == 0.0), "weekday {w} row is not empty");
    }
    let other: f64 = (0..24).filter(|h| *h != 14).map(|h| cal.probability[sat][h]).sum();
    ensure!(other == 0.0, "other Saturday hours carry {other}");
    Ok("Saturday 14:00 = 0.5; six empty weekday rows".into())
}

// ---------------------------------------------------------------- 9

fn readings_strategy() -> impl Strategy<Value = Vec<RawReading>> {
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
    prop::collection::vec((0i64..5_000, 0usize..3, -50.0f64..90.0), 1..120).prop_map(move |raw| {
        raw.into_iter()
            .map(|(sec, ch, v)| RawReading {
                timestamp: t0 + TimeDelta::seconds(sec),
                channel: ["t_mid", "t_top", "flow"][ch].to_string(),
                value: v,
            })
            .collect()
    })
}

fn criterion_9() -> Outcome {
    let cases = 1000;
    let mut runner = TestRunner::new(PtConfig { cases, failure_persistence: None, ..PtConfig::default() });
    let steps = prop::sample::select(vec![1i64, 30, 60, 300]);
    let channels = vec!["t_mid".to_string(), "t_top".to_string()];

    runner
        .run(&(readings_strategy(), steps.clone()), |(readings, step)| {
            let step = TimeDelta::seconds(step);
            let once = resample_forward_fill(&readings, &channels, step).unwrap().frame;
            let names: Vec<String> = once.channel_names().iter().map(|s| s.to_string()).collect();
            let twice = resample_forward_fill(&once.to_readings(), &names, step).unwrap().frame;
            prop_assert_eq!(format!("{once:?}"), format!("{twice:?}"));
            Ok(())
        })
        .map_err(|e| format!("forward fill: {e}"))?;

    runner
        .run(&(readings_strategy(), steps, 0.01f64..0.99), |(readings, step, fraction)| {
            let frame = resample_forward_fill(&readings, &channels, TimeDelta::seconds(step)).unwrap().frame;
            prop_assume!(frame.len() >= 2);
            let spec = SplitSpec { train_fraction: fraction };
            let (train, test) = chronological_split(&frame, &spec).unwrap();
            let joined = train.concat(&test).unwrap();
            prop_assert_eq!(format!("{joined:?}"), format!("{frame:?}"));
            prop_assert!(!train.is_empty() && !test.is_empty());
            Ok(())
        })
        .map_err(|e| format!("split reconstruction: {e}"))?;

    runner
        .run(&(2usize..1_000_000), |rows| {
            let idx = SplitSpec::default().split_index(rows).unwrap();
            let expect = ((rows as u128 * 85) / 100) as usize;
            prop_assert_eq!(idx, expect.clamp(1, rows - 1));
            prop_assert_eq!(idx + (rows - idx), rows);
            Ok(())
        })
        .map_err(|e| format!("85/15 arithmetic: {e}"))?;
    Ok(format!("{cases} cases each for forward fill, split reconstruction and 85/15"))
}

// ---------------------------------------------------------------- pipelines

const SEEDS: [u64; 4] = [42, 43, 44, 45];

struct Runs {
    gbdt: Vec<(u64, Metrics)>,
    lstm: Vec<(u64, Metrics)>,
    determinism: Outcome,
}

fn config(seed: u64, model: ModelName, out: &Path) -> PipelineConfig {
    let household = format!("synthetic-{seed}");
    PipelineConfig { household, seed, model, out: out.to_path_buf(), ..PipelineConfig::default() }
}

fn run(cfg: &PipelineConfig) -> Result<Workspace, String> {
    let started = std::time::Instant::now();
    let ws = Workspace::new(cfg).map_err(|e| e.to_string())?;
    ws.run_all().map_err(|e| format!("seed {} {}: {e}", cfg.seed, cfg.model.as_str()))?;
    eprintln!("  ran {} seed {} in {:.0?}", cfg.model.as_str(), cfg.seed, started.elapsed());
    Ok(ws)
}

fn metrics(ws: &Workspace) -> Result<Metrics, String> {
    let text = std::fs::read_to_string(ws.path("metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn pipelines(root: &Path) -> Result<Runs, String> {
    let mut gbdt = Vec::new();
    let mut lstm = Vec::new();
    let mut first = None;
    for seed in SEEDS {
        let ws = run(&config(seed, ModelName::Gbdt, &root.join("a")))?;
        gbdt.push((seed, metrics(&ws)?));
        if seed == SEEDS[0] {
            first = Some(ws);
        }
        let ws = run(&config(seed, ModelName::Lstm, &root.join("a")))?;
        lstm.push((seed, metrics(&ws)?));
    }
    let a = first.expect("first seed ran");
    let b = run(&config(SEEDS[0], ModelName::Gbdt, &root.join("b")))?;
    let determinism = (|| {
        ensure!(a.run_id == b.run_id, "run ids differ: {} vs {}", a.run_id, b.run_id);
        let files = ["metrics.json", "calendar.json", "calendar.csv", "calendar_cells.csv"];
        for f in files {
            let x = std::fs::read(a.path(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path(f)).map_err(|e| e.to_string())?;
            ensure!(x == y, "{f} differs between identical runs");
        }
        Ok(format!("{} byte-identical across two runs (run_id {})", files.join(", "), a.run_id))
    })();
    Ok(Runs { gbdt, lstm, determinism })
}

fn criterion_5(runs: &Runs) -> Outcome {
    let (seed, m) = &runs.gbdt[0];
    let d = m.detection.as_ref().ok_or("no ground truth to score against")?;
    let s = &d.scores;
    let line = format!(
        "seed {seed}: F1 {:.3}, FAR {:.3} (tp {}, fp {}, fn {})",
        s.f1, s.far, d.true_positives, d.false_positives, d.false_negatives
    );
    ensure!(s.f1 >= 0.80 && s.far <= 0.10, "{line}");
    Ok(line)
}

fn criterion_6(runs: &Runs) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for ((seed, g), (_, l)) in runs.gbdt.iter().zip(&runs.lstm) {
        let (rg, rl) = (g.forecast.rmse, l.forecast.rmse);
        wins += usize::from(rg <= rl);
        parts.push(format!("{seed}: {rg:.3} vs {rl:.3}"));
    }
    let line = format!("gbdt <= lstm on {wins}/4 seeds ({})", parts.join("; "));
    ensure!(wins >= 3, "{line}");
    Ok(line)
}

fn criterion_10(runs: &Runs) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, m) in &runs.gbdt {
        let c = m.controller.as_ref().ok_or("controller comparison missing")?;
        let good = c.waste_reduction >= 0.20 && c.steered.comfort_violations <= c.baseline.comfort_violations;
        ok += usize::from(good);
        parts.push(format!(
            "{seed}: -{:.0}% waste, comfort {}->{}",
            100.0 * c.waste_reduction,
            c.baseline.comfort_violations,
            c.steered.comfort_violations
        ));
    }
    let line = format!("{ok}/4 seeds ({})", parts.join("; "));
    ensure!(ok >= 3, "{line}");
    Ok(line)
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters come from the harness; answer them trivially.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let names = [
        "score oracles",
        "gradient fidelity",
        "boosting correctness",
        "exact Wilcoxon",
        "simulated detection",
        "forecast ordering",
        "calendar fidelity",
        "pipeline determinism",
        "preprocessing contracts",
        "controller comparison",
    ];
    let mut results: Vec<Option<Outcome>> = vec![None; 10];
    results[0] = Some(guarded(criterion_1));
    results[1] = Some(guarded(criterion_2));
    results[2] = Some(guarded(criterion_3));
    results[3] = Some(guarded(criterion_4));
    results[6] = Some(guarded(criterion_7));
    results[8] = Some(guarded(criterion_9));

    let tmp = tempfile::tempdir().expect("temp dir");
    eprintln!("running simulated pipelines for seeds {SEEDS:?}");
    let runs = catch_unwind(AssertUnwindSafe(|| pipelines(tmp.path())));
    match runs {
        Ok(Ok(runs)) => {
            results[4] = Some(guarded(|| criterion_5(&runs)));
            results[5] = Some(guarded(|| criterion_6(&runs)));
            results[7] = Some(runs.determinism.clone());
            results[9] = Some(guarded(|| criterion_10(&runs)));
        }
        Ok(Err(e)) => {
            for i in [4, 5, 7, 9] {
                results[i] = Some(Err(format!("pipeline failed: {e}")));
            }
        }
        Err(_) => {
            for i in [4, 5, 7, 9] {
                results[i] = Some(Err("pipeline panicked".into()));
            }
        }
    }

    let mut failed = 0;
    for (i, (name, r)) in names.iter().zip(results).enumerate() {
        match r.expect("every criterion ran") {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/10 criteria pass", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
