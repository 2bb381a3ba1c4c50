//! Isolation forest scoring and shower-event extraction.
//!
//! Anomaly score `s(x, n) = 2^(−E[h(x)] / c(n))` where `h` is the isolation
//! path length and `c(n)` the average unsuccessful-search length of a binary
//! search tree over `n` points.

use std::io::Write;

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::format_timestamp;
use crate::par::{derive_seed, Exec};

const EULER_GAMMA: f64 = 0.5772156649;

/// Average path length of an unsuccessful search among `n` points.
pub fn c_factor(n: usize) -> Result<f64> {
    match n {
        0 => Err(Error::Domain("c(n) needs n >= 1".into())),
        1 => Ok(0.0),
        2 => Ok(1.0),
        _ => {
            let m = (n - 1) as f64;
            Ok(2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64)
        }
    }
}

/// Score for a mean path length over a forest grown on `n`-point subsamples.
pub fn score_from_path(mean_path: f64, n: usize) -> Result<f64> {
    let c = c_factor(n)?;
    if c == 0.0 {
        return Err(Error::Config("anomaly score undefined for subsample size 1".into()));
    }
    Ok((-mean_path / c).exp2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum IsoNode {
    Internal { feature: usize, split: f64, left: u32, right: u32 },
    External { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoTree {
    pub height_limit: usize,
    /// Arena; the root is `nodes[0]`.
    pub nodes: Vec<IsoNode>,
}

impl IsoTree {
    pub fn single(size: usize) -> Self {
        IsoTree { height_limit: 0, nodes: vec![IsoNode::External { size }] }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &IsoTree, i: usize) -> usize {
            match t.nodes[i] {
                IsoNode::External { .. } => 0,
                IsoNode::Internal { left, right, .. } => 1 + go(t, left as usize).max(go(t, right as usize)),
            }
        }
        go(self, 0)
    }
}

/// Edges walked to the external node, plus `c(size)` for its unresolved points.
pub fn path_length(tree: &IsoTree, x: &[f64]) -> f64 {
    let mut i = 0usize;
    let mut depth = 0.0;
    loop {
        match tree.nodes[i] {
            IsoNode::Internal { feature, split, left, right } => {
                i = if x[feature] < split { left } else { right } as usize;
                depth += 1.0;
            }
            IsoNode::External { size } => return depth + c_factor(size.max(1)).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub psi: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, psi: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub params: ForestParams,
    pub width: usize,
    /// Points each tree was grown on.
    pub sample_size: usize,
    pub trees: Vec<IsoTree>,
}

struct TreeBuilder<'a> {
    points: &'a [f64],
    width: usize,
    rng: ChaCha8Rng,
    nodes: Vec<IsoNode>,
    limit: usize,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: &mut [usize], height: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(IsoNode::External { size: rows.len() });
        if height >= self.limit || rows.len() <= 1 {
            return id;
        }
        let w = self.width;
        let mut ranges = Vec::with_capacity(w);
        for f in 0..w {
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                let v = self.points[r * w + f];
                (lo.min(v), hi.max(v))
            });
            if hi > lo {
                ranges.push((f, lo, hi));
            }
        }
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[self.rng.random_range(0..ranges.len())];
        // Open interval: U in (0, 1) keeps the split strictly inside the range.
        let u = loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                break u;
            }
        };
        let mut split = lo + u * (hi - lo);
        if split <= lo || split > hi {
            split = 0.5 * (lo + hi);
        }
        let mid = partition(rows, |r| self.points[r * w + feature] < split);
        let (l, r) = rows.split_at_mut(mid);
        let left = self.grow(l, height + 1);
        let right = self.grow(r, height + 1);
        self.nodes[id as usize] = IsoNode::Internal { feature, split, left, right };
        id
    }
}

fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut k = 0;
    for i in 0..rows.len() {
        if pred(rows[i]) {
            rows.swap(i, k);
            k += 1;
        }
    }
    k
}

/// Grow a forest on row-major `points` with `width` features.
pub fn build_forest(points: &[f64], width: usize, params: &ForestParams, exec: Exec) -> Result<IsolationForest> {
    if width == 0 || !points.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("{} values do not form rows of {width}", points.len())));
    }
    let n = points.len() / width;
    if n < 2 {
        return Err(Error::Sizing(format!("isolation forest needs at least 2 points, got {n}")));
    }
    if params.n_trees == 0 || params.psi < 2 {
        return Err(Error::Config("need n_trees >= 1 and psi >= 2".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let size = params.psi.min(n);
    let limit = (size as f64).log2().ceil() as usize;
    let trees = exec.map_range(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
        let mut rows: Vec<usize> = if size < n { sample(&mut rng, n, size).into_vec() } else { (0..n).collect() };
        rows.sort_unstable();
        let mut b = TreeBuilder { points, width, rng, nodes: Vec::new(), limit };
        b.grow(&mut rows, 0);
        IsoTree { height_limit: limit, nodes: b.nodes }
    });
    Ok(IsolationForest { params: *params, width, sample_size: size, trees })
}

impl IsolationForest {
    pub fn mean_path(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| path_length(t, x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn anomaly_score(forest: &IsolationForest, x: &[f64]) -> Result<f64> {
    if x.len() != forest.width {
        return Err(Error::Shape(format!("expected {} features, got {}", forest.width, x.len())));
    }
    score_from_path(forest.mean_path(x), forest.sample_size)
}

pub fn score_points(forest: &IsolationForest, points: &[f64], exec: Exec) -> Result<Vec<f64>> {
    let w = forest.width;
    if w == 0 || !points.len().is_multiple_of(w) {
        return Err(Error::Shape(format!("{} values do not form rows of {w}", points.len())));
    }
    let c = c_factor(forest.sample_size)?;
    if c == 0.0 {
        return Err(Error::Config("anomaly score undefined for subsample size 1".into()));
    }
    Ok(exec.map_range(points.len() / w, |i| (-forest.mean_path(&points[i * w..(i + 1) * w]) / c).exp2()))
}

/// Indices of the `floor(contamination · n)` highest scores, earlier index
/// first among equal scores; returned in index order.
pub fn top_fraction(scores: &[f64], contamination: f64) -> Vec<usize> {
    let k = ((contamination * scores.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShowerEvent {
    pub timestamp: DateTime<Utc>,
    pub score: f64,
    /// Decline of t_mid over the trailing difference window, in °C.
    pub drop_magnitude: f64,
    pub suppressed: bool,
}

/// Keep the largest drop among events closer than `window` to each other.
/// Larger drops claim first; equal drops go to the earlier event.
pub fn suppress_window(events: &[ShowerEvent], window: TimeDelta) -> Vec<ShowerEvent> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|a, b| {
        events[*b]
            .drop_magnitude
            .total_cmp(&events[*a].drop_magnitude)
            .then(events[*a].timestamp.cmp(&events[*b].timestamp))
            .then(a.cmp(b))
    });
    let mut kept: Vec<DateTime<Utc>> = Vec::new();
    let mut out: Vec<ShowerEvent> = events.to_vec();
    for i in order {
        let t = events[i].timestamp;
        let clash = kept.iter().any(|k| (*k - t).abs() <= window);
        out[i].suppressed = clash;
        if !clash {
            kept.push(t);
        }
    }
    out
}

pub fn write_events_csv<W: Write>(events: &[ShowerEvent], mut out: W, run_id: Option<&str>) -> Result<()> {
    if let Some(id) = run_id {
        writeln!(out, "# run_id={id}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "score", "drop_magnitude", "retained"])?;
    for e in events {
        w.write_record([
            format_timestamp(e.timestamp),
            format!("{:.6}", e.score),
            format!("{:.4}", e.drop_magnitude),
            if e.suppressed { "0" } else { "1" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// Threshold from the forest's training scores.
    #[default]
    Train,
    /// Threshold from the scored window itself.
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub contamination: f64,
    /// Backward difference used for the drop feature, minutes.
    pub diff_minutes: usize,
    /// Smallest drop accepted as a candidate, °C.
    pub min_drop: f64,
    pub window_minutes: i64,
    pub calibrate_on: Calibration,
    /// Move each candidate to the steepest one-minute decline within its
    /// difference window.
    pub localize_onset: bool,
    pub forest: ForestParams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            contamination: 0.05,
            diff_minutes: 10,
            min_drop: 3.0,
            window_minutes: 30,
            calibrate_on: Calibration::Train,
            localize_onset: true,
            forest: ForestParams::default(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contamination > 0.0 && self.contamination <= 0.5) {
            return Err(Error::Config(format!("contamination {} outside (0, 0.5]", self.contamination)));
        }
        if self.diff_minutes == 0 || self.window_minutes < 0 {
            return Err(Error::Config("diff_minutes must be positive and window non-negative".into()));
        }
        Ok(())
    }
}

/// Scoring features (level, backward difference) of a series; returns the
/// row-major points and the series index each row belongs to. Rows whose
/// value or reference is missing are skipped.
pub fn event_features(t_mid: &[f64], diff: usize) -> (Vec<f64>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut idx = Vec::new();
    for i in diff..t_mid.len() {
        let (now, then) = (t_mid[i], t_mid[i - diff]);
        if now.is_finite() && then.is_finite() {
            pts.push(now);
            pts.push(now - then);
            idx.push(i);
        }
    }
    (pts, idx)
}

pub fn fit_detector(train_t_mid: &[f64], config: &DetectConfig, exec: Exec) -> Result<Detector> {
    config.validate()?;
    let (pts, _) = event_features(train_t_mid, config.diff_minutes);
    let forest = build_forest(&pts, 2, &config.forest, exec)?;
    let scores = score_points(&forest, &pts, exec)?;
    let top = top_fraction(&scores, config.contamination);
    let train_threshold = top.iter().map(|i| scores[*i]).fold(f64::INFINITY, f64::min);
    Ok(Detector { config: config.clone(), forest, train_threshold: train_threshold.is_finite().then_some(train_threshold) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectConfig,
    pub forest: IsolationForest,
    pub train_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Candidates with their suppression flag, time-ordered.
    pub events: Vec<ShowerEvent>,
    pub threshold: Option<f64>,
    pub warnings: Vec<String>,
}

impl Detection {
    pub fn retained(&self) -> impl Iterator<Item = &ShowerEvent> {
        self.events.iter().filter(|e| !e.suppressed)
    }
}

impl Detector {
    /// Score a t_mid series on the grid `timestamps` and extract events.
    pub fn detect(&self, timestamps: &[DateTime<Utc>], t_mid: &[f64], exec: Exec) -> Result<Detection> {
        if timestamps.len() != t_mid.len() {
            return Err(Error::Shape("timestamps and series differ in length".into()));
        }
        let cfg = &self.config;
        let d = cfg.diff_minutes;
        let (pts, idx) = event_features(t_mid, d);
        let mut warnings = Vec::new();
        let scores = score_points(&self.forest, &pts, exec)?;
        if (scores.len() as f64) < 1.0 / cfg.contamination {
            warnings.push(format!(
                "only {} scored points; fewer than 1/contamination = {:.0}",
                scores.len(),
                1.0 / cfg.contamination
            ));
        }
        if scores.windows(2).all(|w| w[0] == w[1]) {
            warnings.push("all anomaly scores are equal; no events".into());
            return Ok(Detection { events: vec![], threshold: None, warnings });
        }
        let (flagged, threshold): (Vec<usize>, Option<f64>) = match (cfg.calibrate_on, self.train_threshold) {
            (Calibration::Train, Some(th)) => ((0..scores.len()).filter(|i| scores[*i] >= th).collect(), Some(th)),
            _ => {
                let top = top_fraction(&scores, cfg.contamination);
                let th = top.iter().map(|i| scores[*i]).fold(f64::INFINITY, f64::min);
                (top, th.is_finite().then_some(th))
            }
        };
        let mut events = Vec::new();
        for k in flagged {
            let i = idx[k];
            let drop = t_mid[i - d] - t_mid[i];
            if drop < cfg.min_drop {
                continue;
            }
            let at = if cfg.localize_onset { steepest_decline(t_mid, i, d) } else { i };
            events.push(ShowerEvent { timestamp: timestamps[at], score: scores[k], drop_magnitude: drop, suppressed: false });
        }
        events.sort_by_key(|e| e.timestamp);
        if events.is_empty() {
            warnings.push("no candidate events above threshold".into());
        }
        let events = suppress_window(&events, TimeDelta::minutes(cfg.window_minutes));
        Ok(Detection { events, threshold, warnings })
    }
}

/// Index in `(i − d, i]` with the largest one-step decline; earliest wins ties.
fn steepest_decline(x: &[f64], i: usize, d: usize) -> usize {
    let mut best = i;
    let mut best_drop = f64::NEG_INFINITY;
    for j in (i + 1 - d).max(1)..=i {
        let step = x[j - 1] - x[j];
        if step.is_finite() && step > best_drop {
            best_drop = step;
            best = j;
        }
    }
    best
}
