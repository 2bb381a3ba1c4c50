//! End-to-end orchestration: configuration, the in-memory stage chain and a
//! file-backed workspace with a run registry.

mod plot;
mod store;

pub use plot::{line_chart_svg, Series};
pub use store::{
    read_forecast_csv, read_registry, registry_path, report, run_id, write_forecast_csv, ModelComparison,
    ReportRow, RunRecord, Stage, Workspace,
    STAGES,
};

use std::path::PathBuf;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::calendar::{aggregate, plan, DemandCalendar, PlanParams, SteeringPlan};
use crate::error::{Error, Result};
use crate::features::{build_features_with, ols_fit, select_significant, FeatureMatrix, FeatureSpec, OlsReport};
use crate::gbdt::{gbdt_fit, random_search_cv, CvOptions, CvResult, GbdtModel, GbdtParams, ParamGrid};
use crate::iforest::{fit_detector, DetectConfig, Detection, Detector};
use crate::ingest::{
    mask_outages, parse_readings, prune_channels, resample_forward_fill, OutageConfig, ParsedReadings,
    Schema, SensorFrame, SplitSpec, PROTECTED_CHANNELS,
};
use crate::metrics::ForecastScores;
use crate::neuralnet::{train, ModelKind, TrainConfig, TrainedNet};
use crate::par::{derive_seed, Exec};
use crate::simulator::{
    compare_controllers, evaluate_detection, simulate, write_raw_log, Controller, ControllerComparison, Guard,
    MatchReport, PlanControl, Scenario, SimTrace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum DataSource {
    Simulate {
        #[serde(default)]
        scenario: Scenario,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: Schema,
        /// Optional ground-truth events CSV (`timestamp` column).
        #[serde(default)]
        truth: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate { scenario: Scenario::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    #[default]
    Gbdt,
    Lstm,
    Bilstm,
    Attlstm,
}

impl ModelName {
    pub fn neural(self) -> Option<ModelKind> {
        match self {
            ModelName::Gbdt => None,
            ModelName::Lstm => Some(ModelKind::Lstm),
            ModelName::Bilstm => Some(ModelKind::Bilstm),
            ModelName::Attlstm => Some(ModelKind::Attlstm),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Gbdt => "gbdt",
            ModelName::Lstm => "lstm",
            ModelName::Bilstm => "bilstm",
            ModelName::Attlstm => "attlstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub step_seconds: i64,
    pub variance_floor: f64,
    pub outage: OutageConfig,
    pub train_fraction: f64,
    /// Hold out exactly this many trailing days instead of the fractional split.
    pub test_days: Option<u32>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            step_seconds: 60,
            variance_floor: 1e-6,
            outage: OutageConfig::default(),
            train_fraction: SplitSpec::default().train_fraction,
            test_days: Some(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub spec: FeatureSpec,
    /// Keep predictors with OLS p below this; `None` keeps all.
    pub ols_alpha: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { spec: FeatureSpec::default(), ols_alpha: Some(0.05) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub enabled: bool,
    pub grid: ParamGrid,
    pub n_iter: usize,
    pub k: usize,
    /// Search on every `row_stride`-th training row; the refit uses all rows.
    pub row_stride: usize,
    /// Shuffle rows before folding instead of contiguous time blocks.
    pub shuffle: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { enabled: true, grid: ParamGrid::default(), n_iter: 20, k: 3, row_stride: 5, shuffle: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Lags come from observations.
    #[default]
    OneStep,
    /// Lags of the target fall back on earlier predictions inside the test window.
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ForecastConfig {
    pub mode: ForecastMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CalendarConfig {
    pub plan: PlanParams,
    /// Plan this many days after the data ends; `None` plans the test window.
    pub horizon_days: Option<u32>,
    /// Also count detections inside the test window. Planning that same
    /// window then sees its own events.
    pub include_test_window: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerConfig {
    pub guard: Option<Guard>,
    pub band: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig { guard: Some(Guard { on_below: 42.0, off_above: 45.0 }), band: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub tolerance_minutes: i64,
    /// Re-simulate the household under the plan and compare with the baseline.
    pub compare_controllers: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { tolerance_minutes: 15, compare_controllers: true }
    }
}

fn toy_net() -> TrainConfig {
    TrainConfig { units: 16, seq_len: 30, epochs: 50, max_windows: Some(3000), ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub household: String,
    pub source: DataSource,
    pub ingest: IngestConfig,
    pub features: FeatureConfig,
    pub model: ModelName,
    pub gbdt: GbdtParams,
    pub tune: TuneConfig,
    pub nn: TrainConfig,
    pub forecast: ForecastConfig,
    pub detect: DetectConfig,
    pub calendar: CalendarConfig,
    pub steer: SteerConfig,
    pub evaluate: EvaluateConfig,
    /// Master seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            household: "household".into(),
            source: DataSource::default(),
            ingest: IngestConfig::default(),
            features: FeatureConfig::default(),
            model: ModelName::Gbdt,
            gbdt: GbdtParams::default(),
            tune: TuneConfig::default(),
            nn: toy_net(),
            forecast: ForecastConfig::default(),
            detect: DetectConfig::default(),
            calendar: CalendarConfig::default(),
            steer: SteerConfig::default(),
            evaluate: EvaluateConfig::default(),
            seed: 42,
            out: PathBuf::from("out"),
            exec: Exec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Apply `DHWCAST_OUT` and `DHWCAST_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(out) = std::env::var("DHWCAST_OUT") {
            self.out = PathBuf::from(out);
        }
        if let Ok(seed) = std::env::var("DHWCAST_SEED") {
            self.seed = seed.parse().map_err(|_| Error::Config(format!("DHWCAST_SEED `{seed}` is not an integer")))?;
        }
        Ok(())
    }

    /// Push the master seed into every stage.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        if let DataSource::Simulate { scenario } = &mut c.source {
            scenario.sim.seed = c.seed;
        }
        c.gbdt.seed = derive_seed(c.seed, 1);
        c.detect.forest.seed = derive_seed(c.seed, 3);
        c.nn.seed = derive_seed(c.seed, 4);
        c
    }

    fn tune_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::Simulate { scenario } => scenario.validate()?,
            DataSource::Csv { path, truth, .. } => {
                for p in std::iter::once(path).chain(truth.iter()) {
                    if !p.exists() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        if self.ingest.step_seconds <= 0 {
            return Err(Error::Config("step_seconds must be positive".into()));
        }
        if self.ingest.test_days == Some(0) {
            return Err(Error::Config("test_days must be positive".into()));
        }
        self.features.spec.validate()?;
        self.gbdt.validate()?;
        self.nn.validate()?;
        self.detect.validate()?;
        if self.tune.row_stride == 0 {
            return Err(Error::Config("tune.row_stride must be positive".into()));
        }
        if self.household.is_empty() || self.household.contains(['/', '\\']) {
            return Err(Error::Config(format!("household name `{}` is not a plain identifier", self.household)));
        }
        Ok(())
    }
}

/// Regularized, pruned and masked data with its train/test boundary.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub frame: SensorFrame,
    pub pruned: Vec<String>,
    pub dropped: Vec<String>,
    pub split_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub valid_rows: usize,
    pub channels: Vec<String>,
    pub pruned: Vec<String>,
    pub dropped: Vec<String>,
    pub skipped_rows: usize,
    pub skipped_cells: usize,
    pub start: DateTime<Utc>,
    pub split_at: DateTime<Utc>,
    /// One step past the last row.
    pub end: DateTime<Utc>,
}

/// Simulate the household under its threshold controller.
pub fn simulate_source(cfg: &PipelineConfig) -> Result<SimTrace> {
    match &cfg.source {
        DataSource::Simulate { scenario } => simulate(scenario, &Controller::Threshold),
        DataSource::Csv { .. } => Err(Error::Config("`simulate` needs a simulation source".into())),
    }
}

pub fn raw_log_bytes(trace: &SimTrace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_raw_log(&trace.frame, &mut buf)?;
    Ok(buf)
}

fn split_point(frame: &SensorFrame, cfg: &IngestConfig) -> Result<DateTime<Utc>> {
    let idx = match cfg.test_days {
        Some(days) => {
            let rows = (days as i64 * 86_400 / frame.step.num_seconds()) as usize;
            if rows >= frame.len() {
                return Err(Error::Sizing(format!("{days} test days leave no training rows")));
            }
            frame.len() - rows
        }
        None => SplitSpec { train_fraction: cfg.train_fraction }.split_index(frame.len())?,
    };
    Ok(frame.timestamp(idx))
}

pub fn ingest(parsed: &ParsedReadings, cfg: &IngestConfig) -> Result<(Ingested, IngestSummary)> {
    let res = resample_forward_fill(&parsed.readings, &parsed.channels, TimeDelta::seconds(cfg.step_seconds))?;
    let pruned = prune_channels(&res.frame, cfg.variance_floor, &PROTECTED_CHANNELS)?;
    for c in PROTECTED_CHANNELS {
        pruned.frame.require(c)?;
    }
    let frame = mask_outages(&pruned.frame, &cfg.outage)?;
    let split_at = split_point(&frame, cfg)?;
    let summary = IngestSummary {
        rows: frame.len(),
        valid_rows: frame.valid_rows(),
        channels: frame.channel_names().iter().map(|s| s.to_string()).collect(),
        pruned: pruned.pruned.clone(),
        dropped: res.dropped.clone(),
        skipped_rows: parsed.skipped_rows,
        skipped_cells: parsed.skipped_cells,
        start: frame.start,
        split_at,
        end: frame.end() + frame.step,
    };
    Ok((Ingested { frame, pruned: pruned.pruned, dropped: res.dropped, split_at }, summary))
}

pub fn parse_source<R: std::io::Read>(source: R, schema: &Schema) -> Result<ParsedReadings> {
    parse_readings(source, schema)
}

#[derive(Debug, Clone)]
pub struct Featurized {
    /// Selected predictor columns only.
    pub matrix: FeatureMatrix,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub ols: Option<OlsReport>,
}

pub fn featurize(frame: &SensorFrame, split_at: DateTime<Utc>, cfg: &FeatureConfig, exec: Exec) -> Result<Featurized> {
    let full = build_features_with(frame, &cfg.spec, exec)?;
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
        (0..full.n_rows()).partition(|&i| full.timestamps[i] < split_at);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Sizing("split leaves no training or no test feature rows".into()));
    }
    let (matrix, ols) = match cfg.ols_alpha {
        Some(alpha) => {
            let train = full.filter_rows(|i| full.timestamps[i] < split_at);
            let report = ols_fit(&train.columns, &train.data, &train.target)?;
            let protected: Vec<String> = cfg.spec.current_channels.clone();
            let protected: Vec<&str> = protected.iter().map(String::as_str).collect();
            let sel = select_significant(&report, alpha, &protected);
            (full.select_columns(&sel.predictors)?, Some(report))
        }
        None => (full, None),
    };
    Ok(Featurized { matrix, train_rows, test_rows, ols })
}

impl Featurized {
    /// Rebuild the split from a matrix and the boundary instant.
    pub fn from_matrix(matrix: FeatureMatrix, split_at: DateTime<Utc>) -> Result<Self> {
        let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
            (0..matrix.n_rows()).partition(|&i| matrix.timestamps[i] < split_at);
        if train_rows.is_empty() || test_rows.is_empty() {
            return Err(Error::Sizing("split leaves no training or no test feature rows".into()));
        }
        Ok(Featurized { matrix, train_rows, test_rows, ols: None })
    }

    fn rows_matrix(&self, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let m = &self.matrix;
        (rows.iter().flat_map(|&i| m.row(i).iter().copied()).collect(), rows.iter().map(|&i| m.target[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Forecaster {
    Gbdt { columns: Vec<String>, model: GbdtModel },
    Net { columns: Vec<String>, model: Box<TrainedNet> },
}

impl Forecaster {
    pub fn columns(&self) -> &[String] {
        match self {
            Forecaster::Gbdt { columns, .. } | Forecaster::Net { columns, .. } => columns,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Random search over the training rows.
pub fn tune(cfg: &PipelineConfig, feats: &Featurized) -> Result<CvResult> {
    if cfg.model != ModelName::Gbdt {
        return Err(Error::Config(format!("tuning applies to gbdt, not {}", cfg.model.as_str())));
    }
    let rows: Vec<usize> = feats.train_rows.iter().copied().step_by(cfg.tune.row_stride).collect();
    let (x, y) = feats.rows_matrix(&rows);
    let opts = CvOptions {
        n_iter: cfg.tune.n_iter,
        k: cfg.tune.k,
        seed: cfg.tune_seed(),
        shuffle: cfg.tune.shuffle,
        min_fold_rows: cfg.features.spec.max_lag() as usize,
        exec: cfg.exec,
    };
    random_search_cv(&x, feats.matrix.width(), &y, &cfg.tune.grid, &opts)
}

/// Fit the configured model on all training rows. `params` overrides the
/// gbdt settings (typically the tuned optimum) except for the seed, which
/// stays the one derived from the master seed.
pub fn fit(cfg: &PipelineConfig, feats: &Featurized, params: Option<&GbdtParams>) -> Result<Forecaster> {
    let columns = feats.matrix.columns.clone();
    match cfg.model.neural() {
        None => {
            let (x, y) = feats.rows_matrix(&feats.train_rows);
            let p = GbdtParams { seed: cfg.gbdt.seed, ..params.unwrap_or(&cfg.gbdt).clone() };
            Ok(Forecaster::Gbdt { columns, model: gbdt_fit(&x, feats.matrix.width(), &y, &p)? })
        }
        Some(kind) => {
            let net = train(kind, &feats.matrix, &feats.train_rows, &cfg.nn)?;
            Ok(Forecaster::Net { columns, model: Box::new(net) })
        }
    }
}

/// One forecast per feature-matrix row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub timestamps: Vec<DateTime<Utc>>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub test: Vec<bool>,
}

impl ForecastSet {
    pub fn segment(&self, test: bool) -> (Vec<DateTime<Utc>>, Vec<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.test.len()).filter(|&i| self.test[i] == test).collect();
        (
            idx.iter().map(|&i| self.timestamps[i]).collect(),
            idx.iter().map(|&i| self.actual[i]).collect(),
            idx.iter().map(|&i| self.predicted[i]).collect(),
        )
    }

    pub fn test_scores(&self) -> Result<ForecastScores> {
        let (_, y, yhat) = self.segment(true);
        ForecastScores::compute(&y, &yhat)
    }
}

pub fn forecast(cfg: &PipelineConfig, model: &Forecaster, frame: &SensorFrame, feats: &Featurized) -> Result<ForecastSet> {
    let m = &feats.matrix;
    if model.columns() != m.columns.as_slice() {
        return Err(Error::Schema("model columns differ from the feature matrix".into()));
    }
    let mut predicted: Vec<Option<f64>> = match model {
        Forecaster::Gbdt { model, .. } => model.predict(&m.data, m.width())?.into_iter().map(Some).collect(),
        Forecaster::Net { model, .. } => cfg.exec.map_range(m.n_rows(), |i| model.predict_row(m, i)),
    };
    if cfg.forecast.mode == ForecastMode::Recursive {
        recursive_rollout(cfg, model, frame, feats, &mut predicted)?;
    }
    let mut out = ForecastSet { timestamps: vec![], actual: vec![], predicted: vec![], test: vec![] };
    let first_test = feats.test_rows[0];
    for (i, p) in predicted.into_iter().enumerate() {
        if let Some(p) = p {
            if !p.is_finite() {
                return Err(Error::Numeric(format!("non-finite forecast at {}", m.timestamps[i])));
            }
            out.timestamps.push(m.timestamps[i]);
            out.actual.push(m.target[i]);
            out.predicted.push(p);
            out.test.push(i >= first_test);
        }
    }
    Ok(out)
}

/// Replace test-window forecasts by a rollout whose target lags read
/// earlier predictions once they fall inside the window.
fn recursive_rollout(
    cfg: &PipelineConfig,
    model: &Forecaster,
    frame: &SensorFrame,
    feats: &Featurized,
    predicted: &mut [Option<f64>],
) -> Result<()> {
    let spec = &cfg.features.spec;
    if spec.horizon != 0 {
        return Err(Error::Config("recursive rollout needs horizon 0".into()));
    }
    let layout = spec.layout(frame)?;
    let target_lag = spec.lagged_channels.iter().position(|c| *c == spec.target_channel);
    let full_columns = spec.columns();
    let pick: Vec<usize> = model
        .columns()
        .iter()
        .map(|c| full_columns.iter().position(|f| f == c).ok_or_else(|| Error::Schema(format!("unknown column `{c}`"))))
        .collect::<Result<_>>()?;
    let m = &feats.matrix;
    let mut rolled = frame.require(&spec.target_channel)?.to_vec();
    let mut scratch = Vec::new();
    let seq_len = match model {
        Forecaster::Net { model, .. } => model.seq_len,
        Forecaster::Gbdt { .. } => 1,
    };
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut last_row: Option<usize> = None;
    for &i in &feats.test_rows {
        let r = m.frame_rows[i];
        let mut overrides = vec![None; layout.lagged.len()];
        if let Some(t) = target_lag {
            overrides[t] = Some(rolled.as_slice());
        }
        layout.row_into(r, m.timestamps[i], &overrides, &mut scratch);
        let row: Vec<f64> = pick.iter().map(|&j| scratch[j]).collect();
        if last_row.is_some_and(|p| p + 1 != r) {
            window.clear();
        }
        if window.is_empty() && seq_len > 1 {
            // Seed the window with observed rows before the test window.
            let back = (i + 1).saturating_sub(seq_len);
            for k in back..i {
                if m.frame_rows[i] - m.frame_rows[k] == i - k {
                    window.push(m.row(k).to_vec());
                }
            }
        }
        window.push(row);
        if window.len() > seq_len {
            window.remove(0);
        }
        last_row = Some(r);
        let p = match model {
            Forecaster::Gbdt { model, .. } => Some(model.predict_row(&window[window.len() - 1])),
            Forecaster::Net { model, .. } => {
                (window.len() == seq_len).then(|| model.predict_window(&window)).transpose()?
            }
        };
        predicted[i] = p;
        if let Some(p) = p {
            rolled[r] = p;
        }
    }
    Ok(())
}

/// A segment's forecasts laid on the frame grid; gaps hold the previous value.
fn grid_series(ts: &[DateTime<Utc>], values: &[f64], step: TimeDelta) -> (Vec<DateTime<Utc>>, Vec<f64>) {
    let (Some(&first), Some(&last)) = (ts.first(), ts.last()) else {
        return (vec![], vec![]);
    };
    let n = ((last - first).num_seconds() / step.num_seconds()) as usize + 1;
    let grid: Vec<DateTime<Utc>> = (0..n).map(|k| first + step * k as i32).collect();
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    let mut current = values[0];
    for t in &grid {
        while j < ts.len() && ts[j] <= *t {
            current = values[j];
            j += 1;
        }
        out.push(current);
    }
    (grid, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detected {
    pub detector: Detector,
    /// Events over the training forecasts; they feed the calendar.
    pub history: Detection,
    pub test: Detection,
}

/// Fit the forest on the in-sample forecasts and scan both segments.
pub fn detect(cfg: &PipelineConfig, fc: &ForecastSet, step: TimeDelta) -> Result<Detected> {
    let (tt, _, tp) = fc.segment(false);
    let (st, _, sp) = fc.segment(true);
    let (train_grid, train_series) = grid_series(&tt, &tp, step);
    let (test_grid, test_series) = grid_series(&st, &sp, step);
    if train_series.is_empty() || test_series.is_empty() {
        return Err(Error::Sizing("detection needs forecasts in both segments".into()));
    }
    let detector = fit_detector(&train_series, &cfg.detect, cfg.exec)?;
    let history = detector.detect(&train_grid, &train_series, cfg.exec)?;
    let test = detector.detect(&test_grid, &test_series, cfg.exec)?;
    Ok(Detected { detector, history, test })
}

/// Calendar over the events in `[start, end)`.
pub fn build_calendar(events: &[DateTime<Utc>], start: DateTime<Utc>, end: DateTime<Utc>) -> Result<DemandCalendar> {
    let inside: Vec<DateTime<Utc>> = events.iter().copied().filter(|t| *t >= start && *t < end).collect();
    aggregate(&inside, start, end)
}

/// Plan horizon: the test window, or `horizon_days` after the data.
pub fn plan_horizon(cfg: &CalendarConfig, split_at: DateTime<Utc>, end: DateTime<Utc>) -> (DateTime<Utc>, DateTime<Utc>) {
    match cfg.horizon_days {
        Some(d) => (end, end + TimeDelta::days(d as i64)),
        None => (split_at, end),
    }
}

pub fn build_plan(cfg: &PipelineConfig, cal: &DemandCalendar, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<SteeringPlan> {
    plan(cal, &cfg.calendar.plan, from, to)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub household: String,
    pub model: ModelName,
    pub forecast_mode: ForecastMode,
    pub test_rows: usize,
    pub forecast: ForecastScores,
    pub detected_events: usize,
    pub detection: Option<MatchReport>,
    pub controller: Option<ControllerComparison>,
    pub warnings: Vec<String>,
}

pub fn evaluate(
    cfg: &PipelineConfig,
    fc: &ForecastSet,
    events: &[DateTime<Utc>],
    truth: Option<&[DateTime<Utc>]>,
    steering: Option<(&SteeringPlan, DateTime<Utc>, DateTime<Utc>)>,
) -> Result<Metrics> {
    let (st, _, _) = fc.segment(true);
    let forecast = fc.test_scores()?;
    let mut warnings = Vec::new();
    let detection = truth.map(|truth| {
        let (lo, hi) = (st[0], *st.last().expect("non-empty test segment"));
        let inside: Vec<DateTime<Utc>> = truth.iter().copied().filter(|t| *t >= lo && *t <= hi).collect();
        evaluate_detection(events, &inside, TimeDelta::minutes(cfg.evaluate.tolerance_minutes))
    });
    if let Some(d) = &detection {
        warnings.extend(d.warnings.iter().cloned());
    }
    let controller = match (&cfg.source, steering, cfg.evaluate.compare_controllers) {
        (DataSource::Simulate { scenario }, Some((plan, from, to)), true) => Some(steer_compare(scenario, &cfg.steer, plan, from, to)?),
        _ => None,
    };
    Ok(Metrics {
        household: cfg.household.clone(),
        model: cfg.model,
        forecast_mode: cfg.forecast.mode,
        test_rows: st.len(),
        forecast,
        detected_events: events.len(),
        detection,
        controller,
        warnings,
    })
}

/// Re-run the household under the plan from `from` on and compare waste
/// with the threshold baseline over `[from, to)`.
pub fn steer_compare(
    scenario: &Scenario,
    steer: &SteerConfig,
    plan: &SteeringPlan,
    from: DateTime<Utc>,
    to: DateTime<Utc>,
) -> Result<ControllerComparison> {
    let baseline = simulate(scenario, &Controller::Threshold)?;
    let control = PlanControl { plan: plan.clone(), from, guard: steer.guard, band: steer.band };
    let steered = simulate(scenario, &Controller::Plan(control))?;
    compare_controllers(&baseline, &steered, from, to)
}

/// Everything one in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub ingested: Ingested,
    pub features: Featurized,
    pub cv: Option<CvResult>,
    pub model: Forecaster,
    pub forecast: ForecastSet,
    pub detected: Detected,
    pub calendar: DemandCalendar,
    pub plan: SteeringPlan,
    pub metrics: Metrics,
    pub truth: Option<Vec<DateTime<Utc>>>,
}

/// The full chain without touching the file system (simulation sources only).
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<RunOutputs> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let trace = simulate_source(&cfg)?;
    let raw = raw_log_bytes(&trace)?;
    let parsed = parse_source(raw.as_slice(), &Schema::default())?;
    let (ingested, _) = ingest(&parsed, &cfg.ingest)?;
    let features = featurize(&ingested.frame, ingested.split_at, &cfg.features, cfg.exec)?;
    let cv = (cfg.model == ModelName::Gbdt && cfg.tune.enabled).then(|| tune(&cfg, &features)).transpose()?;
    let model = fit(&cfg, &features, cv.as_ref().map(|c| &c.best))?;
    let fc = forecast(&cfg, &model, &ingested.frame, &features)?;
    let detected = detect(&cfg, &fc, ingested.frame.step)?;
    let (hist_ts, _, _) = fc.segment(false);
    let end = ingested.frame.end() + ingested.frame.step;
    let mut seen: Vec<DateTime<Utc>> = detected.history.retained().map(|e| e.timestamp).collect();
    let mut cal_end = ingested.split_at;
    if cfg.calendar.include_test_window {
        seen.extend(detected.test.retained().map(|e| e.timestamp));
        cal_end = end;
    }
    let calendar = build_calendar(&seen, hist_ts[0], cal_end)?;
    let (from, to) = plan_horizon(&cfg.calendar, ingested.split_at, end);
    let plan = build_plan(&cfg, &calendar, from, to)?;
    let truth = trace.truth_timestamps();
    let events: Vec<DateTime<Utc>> = detected.test.retained().map(|e| e.timestamp).collect();
    let steering = (cfg.calendar.horizon_days.is_none()).then_some((&plan, from, to));
    let metrics = evaluate(&cfg, &fc, &events, Some(&truth), steering)?;
    Ok(RunOutputs { ingested, features, cv, model, forecast: fc, detected, calendar, plan, metrics, truth: Some(truth) })
}

