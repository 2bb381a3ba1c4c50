//! File-backed stages. Each stage reads the artifacts of earlier stages from
//! `<out>/<household>/<model>/`, writes its own, and appends a record to
//! `<out>/runs.jsonl`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_calendar, build_plan, detect, evaluate, featurize, fit, forecast, ingest, line_chart_svg, parse_source,
    plan_horizon, raw_log_bytes, simulate_source, tune, DataSource, Featurized, ForecastSet, Forecaster,
    ModelName, PipelineConfig, Series,
};
use crate::calendar::{DemandCalendar, SteeringPlan};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gbdt::GbdtParams;
use crate::iforest::write_events_csv;
use crate::ingest::{format_timestamp, parse_timestamp, Schema, SensorFrame};
use crate::metrics::{wilcoxon_exact, ForecastScores};
use crate::neuralnet::write_loss_curve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Ingest,
    Features,
    Tune,
    Train,
    Forecast,
    Detect,
    Calendar,
    Plan,
    Evaluate,
    Report,
}

/// Pipeline order; `report` aggregates across runs and is not part of it.
pub const STAGES: [Stage; 10] = [
    Stage::Simulate,
    Stage::Ingest,
    Stage::Features,
    Stage::Tune,
    Stage::Train,
    Stage::Forecast,
    Stage::Detect,
    Stage::Calendar,
    Stage::Plan,
    Stage::Evaluate,
];

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Forecast => "forecast",
            Stage::Detect => "detect",
            Stage::Calendar => "calendar",
            Stage::Plan => "plan",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

const RAW: &str = "raw.csv";
const TRUTH: &str = "truth.csv";
const SCENARIO: &str = "scenario.json";
const FRAME: &str = "frame.csv";
const INGEST: &str = "ingest.json";
const FEATURES: &str = "features.csv";
const FEATURES_META: &str = "features.json";
const OLS: &str = "ols.csv";
const CV: &str = "cv.csv";
const TUNED: &str = "tuned.json";
const MODEL: &str = "model.json";
const LOSS_CSV: &str = "loss_curve.csv";
const LOSS_SVG: &str = "loss_curve.svg";
const FORECAST: &str = "forecast.csv";
const FORECAST_SVG: &str = "forecast.svg";
const EVENTS: &str = "events.csv";
const HISTORY: &str = "history_events.csv";
const DETECTOR: &str = "detector.json";
const CALENDAR: &str = "calendar.json";
const CALENDAR_CSV: &str = "calendar.csv";
const CALENDAR_CELLS: &str = "calendar_cells.csv";
const CALENDAR_SVG: &str = "calendar.svg";
const PLAN_CSV: &str = "plan.csv";
const PLAN_JSON: &str = "plan.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
const REPORT_CSV: &str = "report.csv";
const REPORT_JSON: &str = "report.json";

/// Content hash of the resolved configuration and the crate version. The
/// output location and execution mode do not change results and are left out.
pub fn run_id(cfg: &PipelineConfig) -> Result<String> {
    let mut c = cfg.resolved();
    c.out = PathBuf::new();
    c.exec = Default::default();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&c)?);
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

pub fn registry_path(out: &Path) -> PathBuf {
    out.join("runs.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub stage: Stage,
    pub household: String,
    pub model: ModelName,
    pub code_version: String,
    pub timestamp: DateTime<Utc>,
    pub config: PipelineConfig,
    pub metrics: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
}

/// Append one JSON line under an exclusive advisory lock.
fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    file.lock()?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let res = (&file).write_all(&line).and_then(|_| (&file).flush());
    file.unlock()?;
    res?;
    Ok(())
}

pub fn read_registry(out: &Path) -> Result<Vec<RunRecord>> {
    let path = registry_path(out);
    if !path.exists() {
        return Ok(vec![]);
    }
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stamped<T> {
    run_id: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeaturesMeta {
    columns: Vec<String>,
    split_at: DateTime<Utc>,
    train_rows: usize,
    test_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TunedParams {
    params: GbdtParams,
    best_rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorMeta {
    train_threshold: Option<f64>,
    test_threshold: Option<f64>,
    history_events: usize,
    test_events: usize,
    warnings: Vec<String>,
    forest_trees: usize,
    forest_sample: usize,
}

pub fn write_forecast_csv<W: Write>(fc: &ForecastSet, mut out: W, run_id: Option<&str>) -> Result<()> {
    if let Some(id) = run_id {
        writeln!(out, "# run_id={id}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "actual", "predicted", "segment"])?;
    for i in 0..fc.timestamps.len() {
        w.write_record([
            format_timestamp(fc.timestamps[i]),
            fc.actual[i].to_string(),
            fc.predicted[i].to_string(),
            if fc.test[i] { "test" } else { "train" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_forecast_csv<R: Read>(source: R) -> Result<ForecastSet> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(source);
    let mut fc = ForecastSet { timestamps: vec![], actual: vec![], predicted: vec![], test: vec![] };
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Schema("forecast CSV needs timestamp,actual,predicted,segment".into()));
        }
        fc.timestamps.push(parse_timestamp(&rec[0]).ok_or_else(|| Error::Data(format!("bad timestamp `{}`", &rec[0])))?);
        fc.actual.push(parse_f64(&rec[1])?);
        fc.predicted.push(parse_f64(&rec[2])?);
        fc.test.push(&rec[3] == "test");
    }
    Ok(fc)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Data(format!("bad number `{s}`")))
}

/// Read a matrix written by [`FeatureMatrix::write_csv`], mapping
/// timestamps back onto `frame` rows.
fn read_features_csv<R: Read>(source: R, frame: &SensorFrame) -> Result<FeatureMatrix> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(source);
    let headers = r.headers()?.clone();
    let n = headers.len();
    if n < 3 || &headers[0] != "timestamp" || &headers[n - 1] != "target" {
        return Err(Error::Schema("feature CSV needs `timestamp` first and `target` last".into()));
    }
    let columns: Vec<String> = headers.iter().skip(1).take(n - 2).map(str::to_string).collect();
    let mut m = FeatureMatrix { columns, data: vec![], target: vec![], frame_rows: vec![], timestamps: vec![] };
    for rec in r.records() {
        let rec = rec?;
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Data(format!("bad timestamp `{}`", &rec[0])))?;
        let row = frame.row_of(ts).ok_or_else(|| Error::Data(format!("feature row {} is off the frame grid", &rec[0])))?;
        for j in 1..n - 1 {
            m.data.push(parse_f64(&rec[j])?);
        }
        m.target.push(parse_f64(&rec[n - 1])?);
        m.frame_rows.push(row);
        m.timestamps.push(ts);
    }
    Ok(m)
}

fn read_event_times<R: Read>(source: R) -> Result<Vec<DateTime<Utc>>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(source);
    let headers = r.headers()?.clone();
    let ts = headers.iter().position(|h| h == "timestamp").ok_or_else(|| Error::Schema("events CSV has no timestamp column".into()))?;
    let retained = headers.iter().position(|h| h == "retained");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if retained.is_some_and(|j| &rec[j] == "0") {
            continue;
        }
        out.push(parse_timestamp(&rec[ts]).ok_or_else(|| Error::Data(format!("bad timestamp `{}`", &rec[ts])))?);
    }
    Ok(out)
}

/// One household/model directory plus the registry it reports to.
pub struct Workspace {
    pub config: PipelineConfig,
    pub run_id: String,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let run_id = run_id(&config)?;
        let dir = config.out.join(&config.household).join(config.model.as_str());
        Ok(Workspace { config, run_id, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn need(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Dependency { artifact: p.display().to_string(), stage: stage.as_str().into() })
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        fs::create_dir_all(&self.dir)?;
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let mut f = self.create(name)?;
        f.write_all(text.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<()> {
        let s = serde_json::to_string_pretty(&Stamped { run_id: self.run_id.clone(), body })?;
        self.write_text(name, &(s + "\n"))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: Stage) -> Result<T> {
        let p = self.need(name, stage)?;
        let s = fs::read_to_string(p)?;
        let stamped: Stamped<T> = serde_json::from_str(&s)?;
        Ok(stamped.body)
    }

    fn open(&self, name: &str, stage: Stage) -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(self.need(name, stage)?)?))
    }

    fn id(&self) -> Option<&str> {
        Some(&self.run_id)
    }

    fn record(&self, stage: Stage, metrics: serde_json::Value, artifacts: &[&str]) -> Result<RunRecord> {
        let rec = RunRecord {
            run_id: self.run_id.clone(),
            stage,
            household: self.config.household.clone(),
            model: self.config.model,
            code_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: Utc::now(),
            config: self.config.clone(),
            metrics,
            artifacts: artifacts.iter().map(|a| self.path(a)).collect(),
        };
        append_record(&registry_path(&self.config.out), &rec)?;
        Ok(rec)
    }

    /// Stages that apply to this configuration, in order.
    pub fn plan_stages(&self) -> Vec<Stage> {
        STAGES
            .into_iter()
            .filter(|s| match s {
                Stage::Simulate => matches!(self.config.source, DataSource::Simulate { .. }),
                Stage::Tune => self.config.model == ModelName::Gbdt && self.config.tune.enabled,
                _ => true,
            })
            .collect()
    }

    pub fn run_all(&self) -> Result<Vec<RunRecord>> {
        self.plan_stages().into_iter().map(|s| self.run(s)).collect()
    }

    pub fn run(&self, stage: Stage) -> Result<RunRecord> {
        log::info!("{} [{}] {}", self.config.household, self.run_id, stage.as_str());
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Ingest => self.ingest(),
            Stage::Features => self.features(),
            Stage::Tune => self.tune(),
            Stage::Train => self.train(),
            Stage::Forecast => self.forecast(),
            Stage::Detect => self.detect(),
            Stage::Calendar => self.calendar(),
            Stage::Plan => self.plan(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => report(&self.config.out),
        }
    }

    fn simulate(&self) -> Result<RunRecord> {
        let trace = simulate_source(&self.config)?;
        let mut raw = self.create(RAW)?;
        writeln!(raw, "# run_id={}", self.run_id)?;
        raw.write_all(&raw_log_bytes(&trace)?)?;
        raw.flush()?;
        trace.write_truth_csv(self.create(TRUTH)?, self.id())?;
        self.write_json(SCENARIO, &trace.scenario)?;
        let m = serde_json::json!({ "minutes": trace.heating.len(), "showers": trace.truth.len() });
        self.record(Stage::Simulate, m, &[RAW, TRUTH, SCENARIO])
    }

    fn load_frame(&self) -> Result<(SensorFrame, super::IngestSummary)> {
        let summary: super::IngestSummary = self.read_json(INGEST, Stage::Ingest)?;
        let frame = SensorFrame::read_csv(self.open(FRAME, Stage::Ingest)?)?;
        Ok((frame, summary))
    }

    fn ingest(&self) -> Result<RunRecord> {
        let parsed = match &self.config.source {
            DataSource::Simulate { .. } => parse_source(self.open(RAW, Stage::Simulate)?, &Schema::default())?,
            DataSource::Csv { path, schema, .. } => parse_source(BufReader::new(File::open(path)?), schema)?,
        };
        let (ing, summary) = ingest(&parsed, &self.config.ingest)?;
        ing.frame.write_csv(self.create(FRAME)?, self.id())?;
        self.write_json(INGEST, &summary)?;
        self.record(Stage::Ingest, serde_json::to_value(&summary)?, &[FRAME, INGEST])
    }

    fn features(&self) -> Result<RunRecord> {
        let (frame, summary) = self.load_frame()?;
        let f = featurize(&frame, summary.split_at, &self.config.features, self.config.exec)?;
        f.matrix.write_csv(self.create(FEATURES)?, self.id())?;
        let mut arts = vec![FEATURES, FEATURES_META];
        if let Some(ols) = &f.ols {
            let mut w = self.create(OLS)?;
            writeln!(w, "# run_id={}", self.run_id)?;
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["name", "coefficient", "std_error", "t_statistic", "p_value"])?;
            for r in &ols.rows {
                c.write_record([r.name.clone(), r.coefficient.to_string(), r.std_error.to_string(), r.t_statistic.to_string(), r.p_value.to_string()])?;
            }
            c.flush()?;
            arts.push(OLS);
        }
        let meta = FeaturesMeta {
            columns: f.matrix.columns.clone(),
            split_at: summary.split_at,
            train_rows: f.train_rows.len(),
            test_rows: f.test_rows.len(),
        };
        self.write_json(FEATURES_META, &meta)?;
        self.record(Stage::Features, serde_json::to_value(&meta)?, &arts)
    }

    fn load_features(&self, frame: &SensorFrame) -> Result<Featurized> {
        let meta: FeaturesMeta = self.read_json(FEATURES_META, Stage::Features)?;
        let m = read_features_csv(self.open(FEATURES, Stage::Features)?, frame)?;
        if m.columns != meta.columns {
            return Err(Error::Schema("features.csv columns disagree with features.json".into()));
        }
        Featurized::from_matrix(m, meta.split_at)
    }

    fn tune(&self) -> Result<RunRecord> {
        let (frame, _) = self.load_frame()?;
        let feats = self.load_features(&frame)?;
        let cv = tune(&self.config, &feats)?;
        cv.write_csv(self.create(CV)?, self.id())?;
        let t = TunedParams { params: cv.best.clone(), best_rmse: cv.best_rmse };
        self.write_json(TUNED, &t)?;
        self.record(Stage::Tune, serde_json::to_value(&t)?, &[CV, TUNED])
    }

    fn train(&self) -> Result<RunRecord> {
        let (frame, _) = self.load_frame()?;
        let feats = self.load_features(&frame)?;
        let tuned: Option<TunedParams> = if self.config.model == ModelName::Gbdt && self.config.tune.enabled {
            Some(self.read_json(TUNED, Stage::Tune)?)
        } else {
            None
        };
        let model = fit(&self.config, &feats, tuned.as_ref().map(|t| &t.params))?;
        self.write_json(MODEL, &model)?;
        let mut arts = vec![MODEL];
        let mut metrics = serde_json::json!({ "train_rows": feats.train_rows.len() });
        if let Forecaster::Net { model, .. } = &model {
            write_loss_curve(&model.curve, self.create(LOSS_CSV)?, self.id())?;
            let pts = |f: fn(&crate::neuralnet::EpochLoss) -> f64| model.curve.iter().map(|e| (e.epoch as f64, f(e))).collect();
            let svg = line_chart_svg(
                "loss",
                "epoch",
                &[
                    Series { name: "train", color: "black", points: pts(|e| e.train_loss) },
                    Series { name: "validation", color: "red", points: pts(|e| e.val_loss) },
                ],
                self.id(),
            );
            self.write_text(LOSS_SVG, &svg)?;
            arts.extend([LOSS_CSV, LOSS_SVG]);
            metrics["final_train_loss"] = model.curve.last().map(|e| e.train_loss).into();
        }
        self.record(Stage::Train, metrics, &arts)
    }

    fn forecast(&self) -> Result<RunRecord> {
        let (frame, _) = self.load_frame()?;
        let feats = self.load_features(&frame)?;
        let model: Forecaster = self.read_json(MODEL, Stage::Train)?;
        let fc = forecast(&self.config, &model, &frame, &feats)?;
        write_forecast_csv(&fc, self.create(FORECAST)?, self.id())?;
        let (ts, y, yhat) = fc.segment(true);
        let x: Vec<f64> = ts.iter().map(|t| (*t - ts[0]).num_minutes() as f64 / 60.0).collect();
        let svg = line_chart_svg(
            "t_mid forecast vs actual",
            "hours into the test window",
            &[
                Series { name: "actual", color: "black", points: x.iter().copied().zip(y).collect() },
                Series { name: "forecast", color: "red", points: x.iter().copied().zip(yhat).collect() },
            ],
            self.id(),
        );
        self.write_text(FORECAST_SVG, &svg)?;
        let scores = fc.test_scores()?;
        self.record(Stage::Forecast, serde_json::to_value(&scores)?, &[FORECAST, FORECAST_SVG])
    }

    fn load_forecast(&self) -> Result<ForecastSet> {
        read_forecast_csv(self.open(FORECAST, Stage::Forecast)?)
    }

    fn detect(&self) -> Result<RunRecord> {
        let fc = self.load_forecast()?;
        let step = grid_step(&fc).unwrap_or(TimeDelta::seconds(self.config.ingest.step_seconds));
        let d = detect(&self.config, &fc, step)?;
        write_events_csv(&d.test.events, self.create(EVENTS)?, self.id())?;
        write_events_csv(&d.history.events, self.create(HISTORY)?, self.id())?;
        let meta = DetectorMeta {
            train_threshold: d.detector.train_threshold,
            test_threshold: d.test.threshold,
            history_events: d.history.retained().count(),
            test_events: d.test.retained().count(),
            warnings: d.test.warnings.clone(),
            forest_trees: d.detector.forest.trees.len(),
            forest_sample: d.detector.forest.sample_size,
        };
        self.write_json(DETECTOR, &meta)?;
        self.record(Stage::Detect, serde_json::to_value(&meta)?, &[EVENTS, HISTORY, DETECTOR])
    }

    fn calendar(&self) -> Result<RunRecord> {
        let fc = self.load_forecast()?;
        let summary: super::IngestSummary = self.read_json(INGEST, Stage::Ingest)?;
        let mut seen = read_event_times(self.open(HISTORY, Stage::Detect)?)?;
        let mut end = summary.split_at;
        if self.config.calendar.include_test_window {
            seen.extend(read_event_times(self.open(EVENTS, Stage::Detect)?)?);
            end = summary.end;
        }
        let (ts, _, _) = fc.segment(false);
        let start = *ts.first().ok_or_else(|| Error::Sizing("no training forecasts".into()))?;
        let cal = build_calendar(&seen, start, end)?;
        self.write_text(CALENDAR, &(cal.to_json(self.id())? + "\n"))?;
        cal.write_matrix_csv(self.create(CALENDAR_CSV)?, self.id())?;
        cal.write_cells_csv(self.create(CALENDAR_CELLS)?, self.id())?;
        self.write_text(CALENDAR_SVG, &cal.to_svg(self.id()))?;
        let m = serde_json::json!({ "events": cal.event_count, "max_probability": cal.max_probability() });
        self.record(Stage::Calendar, m, &[CALENDAR, CALENDAR_CSV, CALENDAR_CELLS, CALENDAR_SVG])
    }

    fn plan(&self) -> Result<RunRecord> {
        let summary: super::IngestSummary = self.read_json(INGEST, Stage::Ingest)?;
        let cal = DemandCalendar::from_json(&fs::read_to_string(self.need(CALENDAR, Stage::Calendar)?)?)?;
        let (from, to) = plan_horizon(&self.config.calendar, summary.split_at, summary.end);
        let plan = build_plan(&self.config, &cal, from, to)?;
        plan.write_csv(self.create(PLAN_CSV)?, self.id())?;
        self.write_json(PLAN_JSON, &PlanFile { from, to, plan: plan.clone() })?;
        let m = serde_json::json!({ "commands": plan.commands.len(), "warnings": plan.warnings });
        self.record(Stage::Plan, m, &[PLAN_CSV, PLAN_JSON])
    }

    fn truth(&self) -> Result<Option<Vec<DateTime<Utc>>>> {
        match &self.config.source {
            DataSource::Simulate { .. } => Ok(Some(read_event_times(self.open(TRUTH, Stage::Simulate)?)?)),
            DataSource::Csv { truth: Some(p), .. } => Ok(Some(read_event_times(BufReader::new(File::open(p)?))?)),
            DataSource::Csv { truth: None, .. } => Ok(None),
        }
    }

    fn evaluate(&self) -> Result<RunRecord> {
        let fc = self.load_forecast()?;
        let events = read_event_times(self.open(EVENTS, Stage::Detect)?)?;
        let pf: PlanFile = self.read_json(PLAN_JSON, Stage::Plan)?;
        let truth = self.truth()?;
        let steering = self.config.calendar.horizon_days.is_none().then_some((&pf.plan, pf.from, pf.to));
        let m = evaluate(&self.config, &fc, &events, truth.as_deref(), steering)?;
        self.write_json(METRICS_JSON, &m)?;
        let mut w = self.create(METRICS_CSV)?;
        writeln!(w, "# run_id={}", self.run_id)?;
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["household", "model", "r2", "rmse", "mape", "mape_percent", "f1", "far", "waste_reduction"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        c.write_record([
            m.household.clone(),
            m.model.as_str().to_string(),
            format!("{:.6}", m.forecast.r2),
            format!("{:.6}", m.forecast.rmse),
            format!("{:.6}", m.forecast.mape),
            format!("{:.4}", m.forecast.mape_percent),
            opt(m.detection.as_ref().map(|d| d.scores.f1)),
            opt(m.detection.as_ref().map(|d| d.scores.far)),
            opt(m.controller.as_ref().map(|c| c.waste_reduction)),
        ])?;
        c.flush()?;
        self.record(Stage::Evaluate, serde_json::to_value(&m)?, &[METRICS_JSON, METRICS_CSV])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanFile {
    from: DateTime<Utc>,
    to: DateTime<Utc>,
    plan: SteeringPlan,
}

fn grid_step(fc: &ForecastSet) -> Option<TimeDelta> {
    fc.timestamps.windows(2).map(|w| w[1] - w[0]).min()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub household: String,
    pub model: ModelName,
    pub scores: ForecastScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub a: ModelName,
    pub b: ModelName,
    pub households: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

fn metrics_files(out: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if !out.exists() {
        return Ok(found);
    }
    for h in fs::read_dir(out)? {
        let h = h?.path();
        if !h.is_dir() {
            continue;
        }
        for m in fs::read_dir(&h)? {
            let p = m?.path().join(METRICS_JSON);
            if p.exists() {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Table of test scores per (household, model) across `out`, with exact
/// signed-rank tests on per-household RMSE for each model pair.
pub fn report(out: &Path) -> Result<RunRecord> {
    let files = metrics_files(out)?;
    if files.is_empty() {
        return Err(Error::Dependency { artifact: out.join("*/*").join(METRICS_JSON).display().to_string(), stage: "evaluate".into() });
    }
    let mut rows = Vec::new();
    for f in &files {
        let m: Stamped<super::Metrics> = serde_json::from_str(&fs::read_to_string(f)?)?;
        rows.push(ReportRow { household: m.body.household, model: m.body.model, scores: m.body.forecast });
    }
    let mut models: Vec<ModelName> = rows.iter().map(|r| r.model).collect();
    models.sort_by_key(|m| m.as_str());
    models.dedup();
    let mut comparisons = Vec::new();
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            for ra in rows.iter().filter(|r| r.model == *a) {
                if let Some(rb) = rows.iter().find(|r| r.model == *b && r.household == ra.household) {
                    xa.push(ra.scores.rmse);
                    xb.push(rb.scores.rmse);
                }
            }
            if xa.is_empty() || xa.len() > crate::metrics::WILCOXON_EXACT_MAX_N {
                continue;
            }
            let w = wilcoxon_exact(&xa, &xb)?;
            comparisons.push(ModelComparison { a: *a, b: *b, households: xa.len(), statistic: w.statistic, p_value: w.p_value, degenerate: w.degenerate });
        }
    }
    fs::create_dir_all(out)?;
    let mut c = csv::Writer::from_writer(BufWriter::new(File::create(out.join(REPORT_CSV))?));
    c.write_record(["household", "model", "r2", "rmse", "mape"])?;
    for r in &rows {
        c.write_record([r.household.clone(), r.model.as_str().into(), format!("{:.6}", r.scores.r2), format!("{:.6}", r.scores.rmse), format!("{:.6}", r.scores.mape)])?;
    }
    c.flush()?;
    let body = serde_json::json!({ "rows": rows, "comparisons": comparisons });
    fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(&body)? + "\n")?;
    let rec = RunRecord {
        run_id: {
            let mut h = Sha256::new();
            h.update(serde_json::to_vec(&body)?);
            hex::encode(h.finalize())[..16].to_string()
        },
        stage: Stage::Report,
        household: "*".into(),
        model: ModelName::default(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        timestamp: Utc::now(),
        config: PipelineConfig { out: out.to_path_buf(), ..PipelineConfig::default() },
        metrics: body,
        artifacts: vec![out.join(REPORT_CSV), out.join(REPORT_JSON)],
    };
    append_record(&registry_path(out), &rec)?;
    Ok(rec)
}
