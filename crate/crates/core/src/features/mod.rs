//! Lag-feature construction and OLS significance screening.

mod ols;

pub use ols::{ols_fit, select_significant, CoefficientRow, OlsReport, Selection};

use std::io::Write;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_timestamp, SensorFrame, T_MID, T_TOP};
use crate::par::Exec;

pub const WEEK: &str = "week";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub lag_minutes: Vec<u32>,
    pub lagged_channels: Vec<String>,
    pub current_channels: Vec<String>,
    pub week: bool,
    /// Minutes between a row's instant and its target instant.
    pub horizon: u32,
    pub target_channel: String,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            lag_minutes: vec![10, 20, 30, 90],
            lagged_channels: vec![T_MID.into(), T_TOP.into()],
            current_channels: vec![T_TOP.into()],
            week: true,
            horizon: 0,
            target_channel: T_MID.into(),
        }
    }
}

pub fn lag_column(channel: &str, lag: u32) -> String {
    format!("{channel}_lag{lag}")
}

impl FeatureSpec {
    fn lags_descending(&self) -> Vec<u32> {
        let mut lags = self.lag_minutes.clone();
        lags.sort_unstable_by(|a, b| b.cmp(a));
        lags.dedup();
        lags
    }

    pub fn validate(&self) -> Result<()> {
        if self.lag_minutes.is_empty() || self.lag_minutes.contains(&0) {
            return Err(Error::Config("lags must be non-empty and strictly positive".into()));
        }
        Ok(())
    }

    pub fn max_lag(&self) -> u32 {
        self.lag_minutes.iter().copied().max().unwrap_or(0)
    }

    /// Column names: each lagged channel from the longest lag down, then the
    /// current channels, then `week`.
    pub fn columns(&self) -> Vec<String> {
        let lags = self.lags_descending();
        let mut cols: Vec<String> = self
            .lagged_channels
            .iter()
            .flat_map(|c| lags.iter().map(move |l| lag_column(c, *l)))
            .collect();
        cols.extend(self.current_channels.iter().cloned());
        if self.week {
            cols.push(WEEK.into());
        }
        cols
    }

    /// Resolves the spec against a frame once, so rows can be built cheaply.
    pub fn layout<'a>(&self, frame: &'a SensorFrame) -> Result<Layout<'a>> {
        self.validate()?;
        let step = frame.step.num_seconds();
        let to_rows = |minutes: u32| -> Result<usize> {
            let secs = minutes as i64 * 60;
            if secs % step != 0 {
                return Err(Error::Config(format!(
                    "{minutes} min is not a multiple of the {step} s grid step"
                )));
            }
            Ok((secs / step) as usize)
        };
        let lags = self
            .lags_descending()
            .into_iter()
            .map(to_rows)
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            lagged: self
                .lagged_channels
                .iter()
                .map(|c| frame.require(c))
                .collect::<Result<_>>()?,
            current: self
                .current_channels
                .iter()
                .map(|c| frame.require(c))
                .collect::<Result<_>>()?,
            target: frame.require(&self.target_channel)?,
            lags,
            horizon: to_rows(self.horizon)?,
            week: self.week,
        })
    }
}

/// A [`FeatureSpec`] bound to a frame's channels, in grid rows.
#[derive(Debug, Clone)]
pub struct Layout<'a> {
    pub lagged: Vec<&'a [f64]>,
    pub current: Vec<&'a [f64]>,
    pub target: &'a [f64],
    /// Descending, in rows.
    pub lags: Vec<usize>,
    pub horizon: usize,
    pub week: bool,
}

impl Layout<'_> {
    pub fn warm_up(&self) -> usize {
        self.lags[0]
    }

    /// Predictor row for instant `row`. `lagged_override` substitutes the
    /// series of lagged channel `i` (used by recursive rollout).
    pub fn row_into(
        &self,
        row: usize,
        timestamp: DateTime<Utc>,
        lagged_override: &[Option<&[f64]>],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        for (i, series) in self.lagged.iter().enumerate() {
            let series = lagged_override.get(i).copied().flatten().unwrap_or(series);
            out.extend(self.lags.iter().map(|l| series[row - l]));
        }
        out.extend(self.current.iter().map(|s| s[row]));
        if self.week {
            out.push(timestamp.iso_week().week() as f64);
        }
    }
}

/// Row-major predictor matrix with its target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub data: Vec<f64>,
    pub target: Vec<f64>,
    /// Frame row of each matrix row's instant.
    pub frame_rows: Vec<usize>,
    pub timestamps: Vec<DateTime<Utc>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.data[i * self.width() + j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows whose positions satisfy `keep`.
    pub fn filter_rows(&self, keep: impl Fn(usize) -> bool) -> FeatureMatrix {
        let w = self.width();
        let idx: Vec<usize> = (0..self.n_rows()).filter(|i| keep(*i)).collect();
        FeatureMatrix {
            columns: self.columns.clone(),
            data: idx.iter().flat_map(|i| self.data[i * w..(i + 1) * w].iter().copied()).collect(),
            target: idx.iter().map(|i| self.target[*i]).collect(),
            frame_rows: idx.iter().map(|i| self.frame_rows[*i]).collect(),
            timestamps: idx.iter().map(|i| self.timestamps[*i]).collect(),
        }
    }

    /// Keep only the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::Schema(format!("no feature column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = (0..self.n_rows())
            .flat_map(|i| idx.iter().map(move |j| (i, *j)))
            .map(|(i, j)| self.data[i * self.width() + j])
            .collect();
        Ok(FeatureMatrix {
            columns: names.to_vec(),
            data,
            target: self.target.clone(),
            frame_rows: self.frame_rows.clone(),
            timestamps: self.timestamps.clone(),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W, run_id: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("target".into());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![format_timestamp(self.timestamps[i])];
            rec.extend(self.row(i).iter().map(f64::to_string));
            rec.push(self.target[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_features(frame: &SensorFrame, spec: &FeatureSpec) -> Result<FeatureMatrix> {
    build_features_with(frame, spec, Exec::default())
}

/// Row at instant τ holds lagged channels at τ − lag, current channels at τ
/// and the ISO week of τ; its target is the target channel at τ + horizon.
/// Rows touching a masked cell are skipped.
pub fn build_features_with(
    frame: &SensorFrame,
    spec: &FeatureSpec,
    exec: Exec,
) -> Result<FeatureMatrix> {
    let layout = spec.layout(frame)?;
    let n = frame.len();
    let warm_up = layout.warm_up();
    if n <= warm_up + layout.horizon {
        return Err(Error::Sizing(format!(
            "{n} rows cannot cover a {warm_up}-row warm-up plus a {}-row horizon",
            layout.horizon
        )));
    }
    let candidates = warm_up..n - layout.horizon;
    let usable = |row: usize| {
        frame.mask[row]
            && frame.mask[row + layout.horizon]
            && layout.lags.iter().all(|l| frame.mask[row - l])
    };

    const BLOCK: usize = 8192;
    let blocks = candidates.len().div_ceil(BLOCK);
    let parts = exec.map_range(blocks, |b| {
        let lo = candidates.start + b * BLOCK;
        let hi = (lo + BLOCK).min(candidates.end);
        let mut data = Vec::new();
        let mut target = Vec::new();
        let mut rows = Vec::new();
        let mut scratch = Vec::new();
        for row in (lo..hi).filter(|r| usable(*r)) {
            layout.row_into(row, frame.timestamp(row), &[], &mut scratch);
            data.extend_from_slice(&scratch);
            target.push(layout.target[row + layout.horizon]);
            rows.push(row);
        }
        (data, target, rows)
    });

    let mut m = FeatureMatrix {
        columns: spec.columns(),
        data: Vec::new(),
        target: Vec::new(),
        frame_rows: Vec::new(),
        timestamps: Vec::new(),
    };
    for (data, target, rows) in parts {
        m.data.extend(data);
        m.target.extend(target);
        m.timestamps.extend(rows.iter().map(|r| frame.timestamp(*r)));
        m.frame_rows.extend(rows);
    }
    Ok(m)
}
