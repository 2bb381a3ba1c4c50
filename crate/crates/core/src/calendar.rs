//! Weekday×hour demand calendar and the heating plan compiled from it.

use std::fmt::Write as _;
use std::io::Write;

use chrono::{DateTime, Datelike, NaiveDate, TimeDelta, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::format_timestamp;

pub const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Per-cell event statistics, indexed `[weekday][hour]` with Monday = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCalendar {
    pub probability: [[f64; 24]; 7],
    pub support: [[u32; 24]; 7],
    pub event_count: [[u32; 24]; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarCell {
    pub weekday: usize,
    pub hour: usize,
    pub probability: f64,
    pub support: u32,
    pub events: u32,
}

fn span_dates(start: DateTime<Utc>, end: DateTime<Utc>) -> Vec<NaiveDate> {
    let last = (end - TimeDelta::nanoseconds(1)).date_naive();
    start.date_naive().iter_days().take_while(|d| *d <= last).collect()
}

/// Aggregate event timestamps observed over `[start, end)`.
pub fn aggregate(events: &[DateTime<Utc>], start: DateTime<Utc>, end: DateTime<Utc>) -> Result<DemandCalendar> {
    if end <= start {
        return Err(Error::Config("calendar span is empty".into()));
    }
    if let Some(e) = events.iter().find(|e| **e < start || **e >= end) {
        return Err(Error::Domain(format!("event {} outside the observation span", format_timestamp(*e))));
    }
    let mut support = [[0u32; 24]; 7];
    for d in span_dates(start, end) {
        let w = d.weekday().num_days_from_monday() as usize;
        support[w].iter_mut().for_each(|s| *s += 1);
    }
    let mut event_count = [[0u32; 24]; 7];
    let mut hit: Vec<(NaiveDate, u32)> = Vec::with_capacity(events.len());
    for e in events {
        let w = e.weekday().num_days_from_monday() as usize;
        event_count[w][e.hour() as usize] += 1;
        hit.push((e.date_naive(), e.hour()));
    }
    hit.sort_unstable();
    hit.dedup();
    let mut dates_hit = [[0u32; 24]; 7];
    for (d, h) in hit {
        dates_hit[d.weekday().num_days_from_monday() as usize][h as usize] += 1;
    }
    let mut probability = [[0.0; 24]; 7];
    for w in 0..7 {
        for h in 0..24 {
            if support[w][h] > 0 {
                probability[w][h] = dates_hit[w][h] as f64 / support[w][h] as f64;
            }
        }
    }
    Ok(DemandCalendar { probability, support, event_count })
}

impl DemandCalendar {
    pub fn cells(&self) -> Vec<CalendarCell> {
        (0..7)
            .flat_map(|w| {
                (0..24).map(move |h| CalendarCell {
                    weekday: w,
                    hour: h,
                    probability: self.probability[w][h],
                    support: self.support[w][h],
                    events: self.event_count[w][h],
                })
            })
            .collect()
    }

    pub fn max_probability(&self) -> f64 {
        self.probability.iter().flatten().cloned().fold(0.0, f64::max)
    }

    /// JSON list of per-cell records.
    pub fn to_json(&self, run_id: Option<&str>) -> Result<String> {
        let v = serde_json::json!({ "run_id": run_id, "cells": self.cells() });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            cells: Vec<CalendarCell>,
        }
        let doc: Doc = serde_json::from_str(s)?;
        let mut cal = DemandCalendar { probability: [[0.0; 24]; 7], support: [[0; 24]; 7], event_count: [[0; 24]; 7] };
        for c in doc.cells {
            if c.weekday >= 7 || c.hour >= 24 {
                return Err(Error::Schema(format!("calendar cell ({}, {}) out of range", c.weekday, c.hour)));
            }
            cal.probability[c.weekday][c.hour] = c.probability;
            cal.support[c.weekday][c.hour] = c.support;
            cal.event_count[c.weekday][c.hour] = c.events;
        }
        Ok(cal)
    }

    /// Probability matrix, one row per weekday.
    pub fn write_matrix_csv<W: Write>(&self, mut out: W, run_id: Option<&str>) -> Result<()> {
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["weekday".to_string()];
        header.extend((0..24).map(|h| format!("h{h:02}")));
        w.write_record(&header)?;
        for (d, row) in self.probability.iter().enumerate() {
            let mut rec = vec![WEEKDAYS[d].to_string()];
            rec.extend(row.iter().map(|p| format!("{p:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format cell table for external plotting.
    pub fn write_cells_csv<W: Write>(&self, mut out: W, run_id: Option<&str>) -> Result<()> {
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["weekday", "hour", "probability", "support", "events"])?;
        for c in self.cells() {
            w.write_record([
                c.weekday.to_string(),
                c.hour.to_string(),
                format!("{:.4}", c.probability),
                c.support.to_string(),
                c.events.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Self-contained SVG heat map.
    pub fn to_svg(&self, run_id: Option<&str>) -> String {
        let (cw, ch, left, top) = (28.0, 24.0, 44.0, 28.0);
        let width = left + 24.0 * cw + 10.0;
        let height = top + 7.0 * ch + 10.0;
        let max = self.max_probability().max(1e-12);
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        if let Some(id) = run_id {
            let _ = writeln!(s, "<!-- run_id={id} -->");
        }
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        for h in 0..24 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{h}</text>"#,
                left + (h as f64 + 0.5) * cw,
                top - 8.0
            );
        }
        for (d, row) in self.probability.iter().enumerate() {
            let y = top + d as f64 * ch;
            let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, y + ch * 0.65, WEEKDAYS[d]);
            for (h, p) in row.iter().enumerate() {
                let v = p / max;
                let shade = (255.0 - 200.0 * v).round() as u8;
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.1}" y="{y:.1}" width="{cw}" height="{ch}" fill="rgb(255,{shade},{shade})" stroke="#ccc"><title>{} {h:02}:00 p={p:.2}</title></rect>"##,
                    left + h as f64 * cw,
                    WEEKDAYS[d]
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Start,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub action: Action,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub p_star: f64,
    pub lead_minutes: i64,
    pub min_run_minutes: i64,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams { p_star: 0.2, lead_minutes: 60, min_run_minutes: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub params: PlanParams,
    pub commands: Vec<Command>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SteeringPlan {
    /// `[start, stop)` pairs.
    pub fn intervals(&self) -> Vec<(DateTime<Utc>, DateTime<Utc>)> {
        self.commands.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0].timestamp, c[1].timestamp)).collect()
    }

    pub fn is_active(&self, t: DateTime<Utc>) -> bool {
        let iv = self.intervals();
        let i = iv.partition_point(|(s, _)| *s <= t);
        i > 0 && t < iv[i - 1].1
    }

    pub fn write_csv<W: Write>(&self, mut out: W, run_id: Option<&str>) -> Result<()> {
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["action", "timestamp"])?;
        for c in &self.commands {
            let a = match c.action {
                Action::Start => "start",
                Action::Stop => "stop",
            };
            w.write_record([a.to_string(), format_timestamp(c.timestamp)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Project qualifying cells onto `[start, end)` as heating windows.
pub fn plan(calendar: &DemandCalendar, params: &PlanParams, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<SteeringPlan> {
    if !(params.p_star > 0.0 && params.p_star <= 1.0) {
        return Err(Error::Config(format!("p_star {} outside (0, 1]", params.p_star)));
    }
    if params.lead_minutes < 0 || params.min_run_minutes <= 0 {
        return Err(Error::Config("lead must be non-negative and min_run positive".into()));
    }
    if end <= start {
        return Err(Error::Config("plan horizon is empty".into()));
    }
    let lead = TimeDelta::minutes(params.lead_minutes);
    let mut raw: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    // Cells of the day after the horizon can still lead into it.
    for d in span_dates(start, end + lead + TimeDelta::hours(1)) {
        let w = d.weekday().num_days_from_monday() as usize;
        let midnight = d.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
        for h in 0..24 {
            if calendar.probability[w][h] >= params.p_star {
                let cell = midnight + TimeDelta::hours(h as i64);
                raw.push((cell - lead, cell + TimeDelta::hours(1)));
            }
        }
    }
    let mut merged: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    for (s, e) in raw {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let min_run = TimeDelta::minutes(params.min_run_minutes);
    let mut commands = Vec::new();
    for (s, e) in merged {
        let (s, e) = (s.max(start), e.min(end));
        if e - s >= min_run {
            commands.push(Command { action: Action::Start, timestamp: s });
            commands.push(Command { action: Action::Stop, timestamp: e });
        }
    }
    let mut warnings = Vec::new();
    if commands.is_empty() {
        let msg = format!(
            "no calendar cell reaches p_star = {} (max probability {:.3}); plan is empty",
            params.p_star,
            calendar.max_probability()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(SteeringPlan { params: *params, commands, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    // 2023-11-06 is a Monday.
    fn four_weeks() -> (DateTime<Utc>, DateTime<Utc>) {
        (at(2023, 11, 6, 0, 0), at(2023, 12, 4, 0, 0))
    }

    #[test]
    fn weekly_event_gives_certainty() {
        let (s, e) = four_weeks();
        let ev: Vec<_> = (0..4).map(|k| at(2023, 11, 6, 7, 15) + TimeDelta::days(7 * k)).collect();
        let cal = aggregate(&ev, s, e).unwrap();
        assert_eq!(cal.probability[0][7], 1.0);
        assert_eq!(cal.support[0][7], 4);
        assert_eq!(cal.cells().len(), 168);
    }

    #[test]
    fn half_of_saturdays() {
        let (s, e) = four_weeks();
        let ev = vec![at(2023, 11, 11, 14, 5), at(2023, 11, 11, 14, 50), at(2023, 11, 25, 14, 30)];
        let cal = aggregate(&ev, s, e).unwrap();
        assert_eq!(cal.probability[5][14], 0.5);
        assert_eq!(cal.event_count[5][14], 3);
        assert!(cal.probability[2].iter().all(|p| *p == 0.0));
        assert!(cal.probability[4].iter().all(|p| *p == 0.0));
        for w in 0..7 {
            for h in 0..24 {
                assert!(cal.probability[w][h] <= cal.event_count[w][h] as f64 / cal.support[w][h] as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn order_free_and_empty() {
        let (s, e) = four_weeks();
        let mut ev = vec![at(2023, 11, 7, 8, 0), at(2023, 11, 20, 21, 10), at(2023, 11, 7, 8, 30)];
        let a = aggregate(&ev, s, e).unwrap();
        ev.reverse();
        assert_eq!(a, aggregate(&ev, s, e).unwrap());
        let z = aggregate(&[], s, e).unwrap();
        assert_eq!(z.max_probability(), 0.0);
        assert_eq!(aggregate(&[at(2024, 1, 1, 0, 0)], s, e).unwrap_err().category(), "domain");
    }

    #[test]
    fn partial_days_count_as_support() {
        let cal = aggregate(&[], at(2023, 11, 12, 0, 0), at(2023, 11, 17, 0, 0)).unwrap();
        assert_eq!(cal.support[6][0], 1);
        assert_eq!(cal.support[3][23], 1);
        assert_eq!(cal.support[4][0], 0);
    }

    fn only_cells(cells: &[(usize, usize, f64)]) -> DemandCalendar {
        let mut cal = aggregate(&[], at(2023, 11, 6, 0, 0), at(2023, 11, 13, 0, 0)).unwrap();
        for (w, h, p) in cells {
            cal.probability[*w][*h] = *p;
        }
        cal
    }

    #[test]
    fn single_cell_plan() {
        let cal = only_cells(&[(5, 14, 0.5)]);
        let p = plan(&cal, &PlanParams::default(), at(2023, 11, 6, 0, 0), at(2023, 11, 13, 0, 0)).unwrap();
        assert_eq!(
            p.commands,
            vec![
                Command { action: Action::Start, timestamp: at(2023, 11, 11, 13, 0) },
                Command { action: Action::Stop, timestamp: at(2023, 11, 11, 15, 0) },
            ]
        );
        assert!(p.is_active(at(2023, 11, 11, 13, 0)));
        assert!(!p.is_active(at(2023, 11, 11, 15, 0)));
        let mut buf = Vec::new();
        p.write_csv(&mut buf, None).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "action,timestamp\nstart,2023-11-11T13:00:00Z\nstop,2023-11-11T15:00:00Z\n");
    }

    #[test]
    fn adjacent_cells_merge() {
        let cal = only_cells(&[(5, 14, 0.5), (5, 15, 0.3)]);
        let p = plan(&cal, &PlanParams::default(), at(2023, 11, 6, 0, 0), at(2023, 11, 13, 0, 0)).unwrap();
        assert_eq!(p.intervals(), vec![(at(2023, 11, 11, 13, 0), at(2023, 11, 11, 16, 0))]);
    }

    #[test]
    fn threshold_too_high_warns() {
        let cal = only_cells(&[(5, 14, 0.5)]);
        let params = PlanParams { p_star: 1.0, ..Default::default() };
        let p = plan(&cal, &params, at(2023, 11, 6, 0, 0), at(2023, 11, 13, 0, 0)).unwrap();
        assert!(p.commands.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn plan_invariants_on_dense_calendar() {
        let cells: Vec<(usize, usize, f64)> =
            (0..7).flat_map(|w| (0..24).map(move |h| (w, h, ((w * 31 + h * 17) % 10) as f64 / 10.0))).collect();
        let cal = only_cells(&cells);
        let (s, e) = (at(2023, 11, 6, 5, 30), at(2023, 11, 20, 0, 0));
        let p = plan(&cal, &PlanParams::default(), s, e).unwrap();
        assert_eq!(p.commands.first().unwrap().action, Action::Start);
        for (i, c) in p.commands.iter().enumerate() {
            assert_eq!(c.action, if i % 2 == 0 { Action::Start } else { Action::Stop });
        }
        let iv = p.intervals();
        for (a, b) in &iv {
            assert!(*b - *a >= TimeDelta::minutes(30));
        }
        for w in iv.windows(2) {
            assert!(w[0].1 < w[1].0);
        }
        // Covered exactly when this hour or the next one qualifies.
        let mut t = s;
        while t < e {
            let floor = t.date_naive().and_hms_opt(t.hour(), 0, 0).unwrap().and_utc();
            let qualifies = |c: DateTime<Utc>| cal.probability[c.weekday().num_days_from_monday() as usize][c.hour() as usize] >= 0.2;
            let expect = qualifies(floor) || qualifies(floor + TimeDelta::hours(1));
            assert_eq!(p.is_active(t), expect, "{t}");
            t += TimeDelta::minutes(7);
        }
    }

    #[test]
    fn exports() {
        let (s, e) = four_weeks();
        let cal = aggregate(&[at(2023, 11, 11, 14, 5)], s, e).unwrap();
        let json = cal.to_json(Some("r1")).unwrap();
        assert!(json.contains("\"run_id\": \"r1\""));
        assert_eq!(DemandCalendar::from_json(&json).unwrap(), cal);
        let mut buf = Vec::new();
        cal.write_matrix_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().nth(6).unwrap().starts_with("Sat,"));
        let svg = cal.to_svg(Some("r1"));
        assert!(svg.contains("<!-- run_id=r1 -->") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 168);
    }
}
