//! Raw sensor log ingestion.
//!
//! Heat-pump controllers log a channel only when its value changes, so a raw
//! export is a sparse CSV. This module parses it into [`RawReading`]s, lays the
//! readings onto a uniform grid with forward fill, drops channels that carry no
//! information, masks outages and splits the result chronologically.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, TimeDelta, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const T_MID: &str = "t_mid";
pub const T_TOP: &str = "t_top";
pub const T_WEIGHTED: &str = "t_weighted";

/// Channels that downstream stages cannot work without.
pub const PROTECTED_CHANNELS: [&str; 2] = [T_MID, T_TOP];

#[derive(Debug, Clone, PartialEq)]
pub struct RawReading {
    pub timestamp: DateTime<Utc>,
    pub channel: String,
    pub value: f64,
}

/// Maps CSV columns onto channel names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub timestamp_column: String,
    /// `(csv column, channel)` pairs. `None` maps every non-timestamp column
    /// onto a channel of the same name.
    #[serde(default)]
    pub columns: Option<Vec<(String, String)>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            timestamp_column: "timestamp".into(),
            columns: None,
        }
    }
}

impl Schema {
    pub fn mapped(timestamp_column: &str, columns: &[(&str, &str)]) -> Self {
        Schema {
            timestamp_column: timestamp_column.into(),
            columns: Some(
                columns
                    .iter()
                    .map(|(c, n)| (c.to_string(), n.to_string()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedReadings {
    pub readings: Vec<RawReading>,
    /// Every mapped channel, in schema order, whether or not it had data.
    pub channels: Vec<String>,
    pub skipped_rows: usize,
    pub skipped_cells: usize,
}

/// Accepts RFC 3339, `YYYY-MM-DD[T ]HH:MM:SS` (taken as UTC) or epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    if let Ok(secs) = s.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0);
    }
    if let Ok(secs) = s.parse::<f64>() {
        if secs.is_finite() {
            return DateTime::from_timestamp(secs.floor() as i64, 0);
        }
    }
    None
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Parse a sparse sensor CSV. Empty cells carry no reading; rows whose
/// timestamp cannot be parsed are skipped and counted. Lines starting with
/// `#` are comments.
pub fn parse_readings<R: Read>(source: R, schema: &Schema) -> Result<ParsedReadings> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(_) => return Ok(ParsedReadings::default()),
    };
    if headers.is_empty() {
        return Ok(ParsedReadings::default());
    }
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = position(&schema.timestamp_column).ok_or_else(|| {
        Error::Schema(format!(
            "timestamp column `{}` not in header",
            schema.timestamp_column
        ))
    })?;
    let mapping: Vec<(usize, String)> = match &schema.columns {
        Some(cols) => cols
            .iter()
            .map(|(col, channel)| {
                position(col)
                    .map(|i| (i, channel.clone()))
                    .ok_or_else(|| Error::Schema(format!("mapped column `{col}` not in header")))
            })
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_col)
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect(),
    };

    let mut out = ParsedReadings {
        channels: mapping.iter().map(|(_, c)| c.clone()).collect(),
        ..Default::default()
    };
    for record in reader.records() {
        let record = record?;
        let Some(ts) = record.get(ts_col).and_then(parse_timestamp) else {
            out.skipped_rows += 1;
            continue;
        };
        for (col, channel) in &mapping {
            let cell = record.get(*col).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            match cell.parse::<f64>() {
                Ok(value) if value.is_finite() => out.readings.push(RawReading {
                    timestamp: ts,
                    channel: channel.clone(),
                    value,
                }),
                _ => out.skipped_cells += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    /// `NaN` marks a cell with no observation at or before its instant.
    pub values: Vec<f64>,
}

/// Uniform grid of channel values with a per-row validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub start: DateTime<Utc>,
    pub step: TimeDelta,
    pub channels: Vec<Channel>,
    pub mask: Vec<bool>,
}

impl SensorFrame {
    /// Build a frame from dense columns; the mask is "every cell finite".
    pub fn from_columns(
        start: DateTime<Utc>,
        step: TimeDelta,
        channels: Vec<Channel>,
    ) -> Result<Self> {
        let n = channels.first().map_or(0, |c| c.values.len());
        if channels.iter().any(|c| c.values.len() != n) {
            return Err(Error::Shape("channel lengths differ".into()));
        }
        let mut frame = SensorFrame {
            start,
            step,
            channels,
            mask: vec![true; n],
        };
        frame.mask = (0..n).map(|i| frame.row_finite(i)).collect();
        Ok(frame)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn timestamp(&self, row: usize) -> DateTime<Utc> {
        self.start + self.step * row as i32
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len().saturating_sub(1))
    }

    /// Row index of an instant on the grid, if it is on the grid.
    pub fn row_of(&self, t: DateTime<Utc>) -> Option<usize> {
        let offset = (t - self.start).num_seconds();
        let step = self.step.num_seconds();
        if offset < 0 || offset % step != 0 {
            return None;
        }
        let row = (offset / step) as usize;
        (row < self.len()).then_some(row)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.channel(name)
            .ok_or_else(|| Error::Schema(format!("frame has no `{name}` channel")))
    }

    fn row_finite(&self, row: usize) -> bool {
        self.channels.iter().all(|c| c.values[row].is_finite())
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SensorFrame {
        SensorFrame {
            start: self.timestamp(range.start),
            step: self.step,
            channels: self
                .channels
                .iter()
                .map(|c| Channel {
                    name: c.name.clone(),
                    values: c.values[range.clone()].to_vec(),
                })
                .collect(),
            mask: self.mask[range].to_vec(),
        }
    }

    /// Append `other`, which must continue this frame's grid exactly.
    pub fn concat(&self, other: &SensorFrame) -> Result<SensorFrame> {
        if other.step != self.step
            || other.start != self.start + self.step * self.len() as i32
            || other.channel_names() != self.channel_names()
        {
            return Err(Error::Shape("frames are not contiguous".into()));
        }
        let mut out = self.clone();
        for (c, o) in out.channels.iter_mut().zip(&other.channels) {
            c.values.extend_from_slice(&o.values);
        }
        out.mask.extend_from_slice(&other.mask);
        Ok(out)
    }

    /// One reading per finite cell.
    pub fn to_readings(&self) -> Vec<RawReading> {
        let mut out = Vec::new();
        for c in &self.channels {
            for (i, v) in c.values.iter().enumerate() {
                if v.is_finite() {
                    out.push(RawReading {
                        timestamp: self.timestamp(i),
                        channel: c.name.clone(),
                        value: *v,
                    });
                }
            }
        }
        out
    }

    /// `timestamp,<channels...>,valid`. Cells without a value are empty.
    pub fn write_csv<W: Write>(&self, out: W, run_id: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.channels.iter().map(|c| c.name.clone()));
        header.push("valid".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(format_timestamp(self.timestamp(i)));
            for c in &self.channels {
                let v = c.values[i];
                row.push(if v.is_finite() { v.to_string() } else { String::new() });
            }
            row.push(if self.mask[i] { "1" } else { "0" }.into());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back a frame written by [`SensorFrame::write_csv`].
    pub fn read_csv<R: Read>(source: R) -> Result<SensorFrame> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(source);
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("timestamp") || headers.iter().next_back() != Some("valid") {
            return Err(Error::Schema(
                "frame CSV needs `timestamp` first and `valid` last".into(),
            ));
        }
        let names: Vec<String> = headers
            .iter()
            .skip(1)
            .take(headers.len() - 2)
            .map(str::to_string)
            .collect();
        let mut times = Vec::new();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut mask = Vec::new();
        for record in reader.records() {
            let record = record?;
            let ts = parse_timestamp(&record[0])
                .ok_or_else(|| Error::Data(format!("bad timestamp `{}`", &record[0])))?;
            times.push(ts);
            for (j, col) in columns.iter_mut().enumerate() {
                let cell = record[j + 1].trim();
                col.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse()
                        .map_err(|_| Error::Data(format!("bad value `{cell}`")))?
                });
            }
            mask.push(&record[names.len() + 1] == "1");
        }
        if times.is_empty() {
            return Err(Error::Data("frame CSV has no rows".into()));
        }
        let step = if times.len() > 1 {
            times[1] - times[0]
        } else {
            TimeDelta::minutes(1)
        };
        if times.windows(2).any(|w| w[1] - w[0] != step) || step <= TimeDelta::zero() {
            return Err(Error::Data("frame CSV is not on a uniform grid".into()));
        }
        Ok(SensorFrame {
            start: times[0],
            step,
            channels: names
                .into_iter()
                .zip(columns)
                .map(|(name, values)| Channel { name, values })
                .collect(),
            mask,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Resampled {
    pub frame: SensorFrame,
    /// Channels with no readings at all.
    pub dropped: Vec<String>,
}

fn floor_to_step(t: DateTime<Utc>, step: TimeDelta) -> DateTime<Utc> {
    let secs = t.timestamp();
    let s = step.num_seconds();
    DateTime::from_timestamp(secs.div_euclid(s) * s, 0).expect("in range")
}

/// Lay readings onto a grid starting at the first timestamp rounded down to
/// `step`; every cell holds the latest reading at or before its instant.
/// Within a channel, the last of several readings sharing a timestamp wins.
pub fn resample_forward_fill(
    readings: &[RawReading],
    channels: &[String],
    step: TimeDelta,
) -> Result<Resampled> {
    if step.num_seconds() <= 0 || step.subsec_nanos() != 0 {
        return Err(Error::Config("step must be a positive whole number of seconds".into()));
    }
    let (Some(first), Some(last)) = (
        readings.iter().map(|r| r.timestamp).min(),
        readings.iter().map(|r| r.timestamp).max(),
    ) else {
        return Err(Error::Data("no readings to resample".into()));
    };
    let start = floor_to_step(first, step);
    let rows = ((last - start).num_seconds() / step.num_seconds()) as usize + 1;

    let mut order: Vec<String> = channels.to_vec();
    let mut by_channel: HashMap<&str, Vec<(DateTime<Utc>, f64)>> = HashMap::new();
    for r in readings {
        if !order.iter().any(|c| c == &r.channel) {
            order.push(r.channel.clone());
        }
        by_channel
            .entry(r.channel.as_str())
            .or_default()
            .push((r.timestamp, r.value));
    }

    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for name in order {
        let Some(series) = by_channel.get_mut(name.as_str()) else {
            log::warn!("channel `{name}` has no readings; dropped");
            dropped.push(name);
            continue;
        };
        // Stable sort keeps file order among equal timestamps, so the
        // cursor below ends on the last one.
        series.sort_by_key(|(t, _)| *t);
        let mut values = vec![f64::NAN; rows];
        let mut cursor = 0;
        let mut current = f64::NAN;
        for (i, slot) in values.iter_mut().enumerate() {
            // A cell holds the latest reading inside [at, at + step).
            let end = start + step * (i as i32 + 1);
            while cursor < series.len() && series[cursor].0 < end {
                current = series[cursor].1;
                cursor += 1;
            }
            *slot = current;
        }
        out.push(Channel { name, values });
    }
    Ok(Resampled {
        frame: SensorFrame::from_columns(start, step, out)?,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct Pruned {
    pub frame: SensorFrame,
    pub pruned: Vec<String>,
}

/// Sample variance over finite values; `None` with fewer than two.
fn sample_variance(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let ss: f64 = finite.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some(ss / (finite.len() - 1) as f64)
}

/// Remove channels whose sample variance is at most `variance_floor`.
/// Names in `protected` are always kept.
pub fn prune_channels(
    frame: &SensorFrame,
    variance_floor: f64,
    protected: &[&str],
) -> Result<Pruned> {
    if frame.is_empty() {
        return Err(Error::Data("cannot prune an empty frame".into()));
    }
    let (kept, pruned): (Vec<&Channel>, Vec<&Channel>) = frame.channels.iter().partition(|c| {
        protected.contains(&c.name.as_str())
            || sample_variance(&c.values).is_some_and(|v| v > variance_floor)
    });
    if kept.is_empty() {
        return Err(Error::Pipeline("every channel was pruned; nothing to model".into()));
    }
    // Rows that were invalid although every old cell was finite are outages
    // and stay masked; rows only invalid through a pruned channel recover.
    let mask = (0..frame.len())
        .map(|i| {
            let outage = !frame.mask[i] && frame.row_finite(i);
            !outage && kept.iter().all(|c| c.values[i].is_finite())
        })
        .collect();
    Ok(Pruned {
        frame: SensorFrame {
            start: frame.start,
            step: frame.step,
            channels: kept.into_iter().cloned().collect(),
            mask,
        },
        pruned: pruned.into_iter().map(|c| c.name.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageConfig {
    pub band: (f64, f64),
    /// Longest tolerated run of identical values, in minutes.
    pub max_flat_run_minutes: i64,
    pub temperature_channels: Vec<String>,
}

impl Default for OutageConfig {
    fn default() -> Self {
        OutageConfig {
            band: (0.0, 100.0),
            max_flat_run_minutes: 24 * 60,
            temperature_channels: vec![T_MID.into(), T_TOP.into(), T_WEIGHTED.into()],
        }
    }
}

/// Mask rows with out-of-band temperatures or implausibly long flat runs.
pub fn mask_outages(frame: &SensorFrame, config: &OutageConfig) -> Result<SensorFrame> {
    let (lo, hi) = config.band;
    if !(lo < hi) {
        return Err(Error::Config(format!("plausibility band ({lo}, {hi}) is empty")));
    }
    let max_run = TimeDelta::minutes(config.max_flat_run_minutes);
    let mut out = frame.clone();
    for c in &frame.channels {
        if !config.temperature_channels.contains(&c.name) {
            continue;
        }
        for (i, v) in c.values.iter().enumerate() {
            if v.is_finite() && (*v < lo || *v > hi) {
                out.mask[i] = false;
            }
        }
        let mut run_start = 0;
        for i in 1..=c.values.len() {
            let continues = i < c.values.len()
                && c.values[i].is_finite()
                && c.values[i] == c.values[run_start];
            if continues {
                continue;
            }
            let span = frame.step * (i - 1 - run_start) as i32;
            if c.values[run_start].is_finite() && span > max_run {
                out.mask[run_start..i].iter_mut().for_each(|m| *m = false);
            }
            run_start = i;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.85 }
    }
}

impl SplitSpec {
    /// `floor(train_fraction * rows)`, kept inside `1..rows`.
    pub fn split_index(&self, rows: usize) -> Result<usize> {
        let f = self.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("train fraction {f} outside (0, 1)")));
        }
        if rows < 2 {
            return Err(Error::Sizing(format!("cannot split {rows} rows")));
        }
        let raw = (f * rows as f64 + 1e-9).floor() as usize;
        Ok(raw.clamp(1, rows - 1))
    }
}

/// Contiguous train prefix and test suffix.
pub fn chronological_split(
    frame: &SensorFrame,
    spec: &SplitSpec,
) -> Result<(SensorFrame, SensorFrame)> {
    let idx = spec.split_index(frame.len())?;
    Ok((frame.slice(0..idx), frame.slice(idx..frame.len())))
}
