//! Synthetic households: a two-node stratified hot-water tank heated by a
//! heat pump, drained by scheduled showers and small background draws.
//!
//! Per minute (explicit Euler, dt = 1 min):
//! draws, then Newton loss toward ambient, then top→mid destratification,
//! then heating `dT = k_node · (T_supply − T)` once the compressor has run
//! longer than its start-up delay.

use std::io::Write;

use chrono::{DateTime, Datelike, TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::calendar::SteeringPlan;
use crate::error::{Error, Result};
use crate::ingest::{format_timestamp, Channel, SensorFrame, T_MID, T_TOP, T_WEIGHTED};
use crate::metrics::{f1_far, DetectionScores};
use crate::par::derive_seed;

pub const COMPRESSOR: &str = "compressor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TankConfig {
    /// Share of the tank volume in the top node.
    pub top_fraction: f64,
    /// Heating coefficients toward the supply temperature, 1/min.
    pub heat_rate_top: f64,
    pub heat_rate_mid: f64,
    pub supply_temperature: f64,
    /// Newton cooling toward ambient, 1/min.
    pub loss_coefficient: f64,
    pub ambient: f64,
    pub inlet: f64,
    /// Top→mid relaxation, 1/min.
    pub mixing: f64,
    /// Fraction of a mid-node drop that reaches the top node.
    pub draw_top_coupling: f64,
    pub start_threshold: f64,
    pub stop_threshold: f64,
    /// Compressor minutes before heat reaches the tank.
    pub start_delay_minutes: u32,
    pub sensor_resolution: f64,
    pub initial_top: f64,
    pub initial_mid: f64,
}

impl Default for TankConfig {
    fn default() -> Self {
        TankConfig {
            top_fraction: 0.4,
            heat_rate_top: 0.02,
            heat_rate_mid: 0.005,
            supply_temperature: 60.0,
            loss_coefficient: 3e-4,
            ambient: 20.0,
            inlet: 10.0,
            mixing: 0.01,
            draw_top_coupling: 0.05,
            start_threshold: 43.0,
            stop_threshold: 53.0,
            start_delay_minutes: 5,
            sensor_resolution: 0.1,
            initial_top: 55.0,
            initial_mid: 48.0,
        }
    }
}

impl TankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heat_rate_top > 0.0 && self.heat_rate_mid > 0.0 && self.heat_rate_top <= 1.0 && self.heat_rate_mid <= 1.0) {
            return Err(Error::Config("heating rates must lie in (0, 1]".into()));
        }
        if !(self.loss_coefficient >= 0.0 && self.mixing >= 0.0 && self.mixing <= 0.5) {
            return Err(Error::Config("loss must be >= 0 and mixing within [0, 0.5]".into()));
        }
        if self.start_threshold >= self.stop_threshold {
            return Err(Error::Config(format!(
                "start threshold {} must be below stop threshold {}",
                self.start_threshold, self.stop_threshold
            )));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction < 1.0) || self.sensor_resolution <= 0.0 {
            return Err(Error::Config("top_fraction in (0, 1) and positive sensor resolution required".into()));
        }
        Ok(())
    }
}

/// Weekly shower habits plus background usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HouseholdProfile {
    /// Shower probability per `[weekday][hour]`, Monday = 0.
    pub grid: [[f64; 24]; 7],
    /// Median mid-node drop of a shower, °C (log-normal).
    pub magnitude_median: f64,
    pub magnitude_sigma: f64,
    /// Small draws per hour between 06:00 and 23:00.
    pub background_rate: f64,
    pub background_median: f64,
    pub background_sigma: f64,
    /// Probability that a scheduled shower keeps its hour; otherwise it lands
    /// uniformly within the day.
    pub regularity: f64,
    pub min_gap_minutes: i64,
}

pub fn default_grid() -> [[f64; 24]; 7] {
    let mut g = [[0.0; 24]; 7];
    for (d, morning, evening) in [(0, 0.85, 0.3), (1, 0.8, 0.5), (2, 0.8, 0.0), (3, 0.8, 0.5), (4, 0.85, 0.0)] {
        g[d][7] = morning;
        g[d][21] = evening;
    }
    g[5][9] = 0.6;
    g[5][14] = 0.5;
    g[6][10] = 0.8;
    g[6][20] = 0.4;
    g
}

impl Default for HouseholdProfile {
    fn default() -> Self {
        HouseholdProfile {
            grid: default_grid(),
            magnitude_median: 6.0,
            magnitude_sigma: 0.25,
            background_rate: 0.3,
            background_median: 0.6,
            background_sigma: 0.4,
            regularity: 0.9,
            min_gap_minutes: 60,
        }
    }
}

impl HouseholdProfile {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("shower probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.regularity) {
            return Err(Error::Config(format!("regularity {} outside [0, 1]", self.regularity)));
        }
        if !(self.magnitude_median > 0.0 && self.background_median > 0.0)
            || self.magnitude_sigma < 0.0
            || self.background_sigma < 0.0
            || self.background_rate < 0.0
        {
            return Err(Error::Config("draw magnitudes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub start: DateTime<Utc>,
    pub days: u32,
    pub seed: u64,
    /// Emit auxiliary and constant channels besides the tank sensors.
    pub decoys: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            start: Utc.with_ymd_and_hms(2023, 8, 14, 0, 0, 0).unwrap(),
            days: 95,
            seed: 42,
            decoys: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Scenario {
    pub tank: TankConfig,
    pub profile: HouseholdProfile,
    pub sim: SimConfig,
}

impl Scenario {
    pub fn minutes(&self) -> usize {
        self.sim.days as usize * 1440
    }

    pub fn validate(&self) -> Result<()> {
        self.tank.validate()?;
        self.profile.validate()?;
        if self.sim.days < 1 {
            return Err(Error::Config("simulation needs at least one day".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub minute: usize,
    /// Requested mid-node drop, °C.
    pub magnitude: f64,
    pub shower: bool,
}

/// Shower and background draws for the whole run; depends only on the
/// profile and seed, never on the controller.
pub fn schedule_draws(profile: &HouseholdProfile, start: DateTime<Utc>, days: u32, seed: u64) -> Result<Vec<Draw>> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let big = LogNormal::new(profile.magnitude_median.ln(), profile.magnitude_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    let small = LogNormal::new(profile.background_median.ln(), profile.background_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    let start_weekday = start.weekday().num_days_from_monday() as usize;
    let mut showers: Vec<Draw> = Vec::new();
    let mut background: Vec<Draw> = Vec::new();
    for day in 0..days as usize {
        let w = (start_weekday + day) % 7;
        let base = day * 1440;
        for h in 0..24 {
            let p = profile.grid[w][h];
            let hit = rng.random::<f64>() < p;
            let keep_hour = rng.random::<f64>() < profile.regularity;
            let within: usize = rng.random_range(0..60);
            let anywhere: usize = rng.random_range(0..1440);
            let magnitude = big.sample(&mut rng);
            if hit {
                let minute = if keep_hour { base + h * 60 + within } else { base + anywhere };
                showers.push(Draw { minute, magnitude, shower: true });
            }
        }
        for h in 6..23 {
            let hit = rng.random::<f64>() < profile.background_rate;
            let within: usize = rng.random_range(0..60);
            let magnitude = small.sample(&mut rng);
            if hit {
                background.push(Draw { minute: base + h * 60 + within, magnitude, shower: false });
            }
        }
    }
    showers.sort_by_key(|d| d.minute);
    let gap = profile.min_gap_minutes.max(0) as usize;
    let mut kept: Vec<Draw> = Vec::with_capacity(showers.len());
    for s in showers {
        if kept.last().is_none_or(|k| s.minute >= k.minute + gap) {
            kept.push(s);
        }
    }
    // Background draws stay clear of showers so each planted drop is clean.
    background.retain(|b| kept.iter().all(|s| b.minute.abs_diff(s.minute) > 15));
    kept.extend(background);
    kept.sort_by_key(|d| (d.minute, !d.shower));
    Ok(kept)
}

/// Hysteresis: on below `start`, off above `stop`, otherwise hold.
pub fn threshold_controller(on: bool, t_weighted: f64, start: f64, stop: f64) -> bool {
    if t_weighted < start {
        true
    } else if t_weighted > stop {
        false
    } else {
        on
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub on_below: f64,
    pub off_above: f64,
}

impl Default for Guard {
    fn default() -> Self {
        Guard { on_below: 46.0, off_above: 49.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanControl {
    pub plan: SteeringPlan,
    /// Threshold control applies before this instant.
    pub from: DateTime<Utc>,
    /// t_top hysteresis used outside plan windows; none means no heating there.
    pub guard: Option<Guard>,
    /// Hold band under the stop threshold inside plan windows, °C.
    pub band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Controller {
    Threshold,
    AlwaysOn,
    AlwaysOff,
    Plan(PlanControl),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub timestamp: DateTime<Utc>,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub scenario: Scenario,
    pub frame: SensorFrame,
    pub truth: Vec<TruthEvent>,
    pub draws: Vec<Draw>,
    pub heating: Vec<bool>,
    /// Per shower: true top temperature was below the comfort limit.
    pub cold_shower: Vec<bool>,
}

pub const COMFORT_LIMIT: f64 = 45.0;
pub const DEMAND_LOOKAHEAD_MINUTES: usize = 120;

fn quantize(x: f64, res: f64) -> f64 {
    let q = (x / res).round() * res;
    // Trim representation noise so CSV output stays short.
    (q * 1e6).round() / 1e6
}

pub fn simulate(scenario: &Scenario, controller: &Controller) -> Result<SimTrace> {
    scenario.validate()?;
    let draws = schedule_draws(&scenario.profile, scenario.sim.start, scenario.sim.days, scenario.sim.seed)?;
    simulate_with_draws(scenario, controller, draws)
}

/// Run the tank against an explicit draw list (minute offsets from the start).
#[allow(clippy::needless_range_loop)]
pub fn simulate_with_draws(scenario: &Scenario, controller: &Controller, mut draws: Vec<Draw>) -> Result<SimTrace> {
    scenario.validate()?;
    let tank = &scenario.tank;
    let n = scenario.minutes();
    draws.retain(|d| d.minute < n);
    draws.sort_by_key(|d| (d.minute, !d.shower));
    let start = scenario.sim.start;
    let res = tank.sensor_resolution;

    let active: Vec<bool> = match controller {
        Controller::Plan(pc) => {
            let mut a = vec![false; n];
            for (s, e) in pc.plan.intervals() {
                let lo = ((s - start).num_minutes().max(0) as usize).min(n);
                let hi = ((e - start).num_minutes().max(0) as usize).min(n);
                a[lo..hi].iter_mut().for_each(|v| *v = true);
            }
            a
        }
        _ => Vec::new(),
    };
    let steer_from = match controller {
        Controller::Plan(pc) => (pc.from - start).num_minutes().max(0) as usize,
        _ => usize::MAX,
    };

    let (mut top, mut mid) = (tank.initial_top, tank.initial_mid);
    let mut on = false;
    let mut run = 0u32;
    let mut t_top = Vec::with_capacity(n);
    let mut t_mid = Vec::with_capacity(n);
    let mut t_w = Vec::with_capacity(n);
    let mut heating = Vec::with_capacity(n);
    let mut truth = Vec::new();
    let mut cold_shower = Vec::new();
    let mut next_draw = 0;

    for m in 0..n {
        let (qt, qm) = (quantize(top, res), quantize(mid, res));
        let w = quantize((qt + qm) / 2.0, res / 2.0);
        t_top.push(qt);
        t_mid.push(qm);
        t_w.push(w);

        on = match controller {
            Controller::Threshold => threshold_controller(on, w, tank.start_threshold, tank.stop_threshold),
            Controller::AlwaysOn => true,
            Controller::AlwaysOff => false,
            Controller::Plan(_) if m < steer_from => {
                threshold_controller(on, w, tank.start_threshold, tank.stop_threshold)
            }
            Controller::Plan(pc) => {
                if active[m] {
                    threshold_controller(on, w, tank.stop_threshold - pc.band, tank.stop_threshold)
                } else if let Some(g) = pc.guard {
                    threshold_controller(on, qt, g.on_below, g.off_above)
                } else {
                    false
                }
            }
        };
        run = if on { run + 1 } else { 0 };
        heating.push(on);

        while next_draw < draws.len() && draws[next_draw].minute == m {
            let d = draws[next_draw];
            if d.shower {
                truth.push(TruthEvent { timestamp: start + TimeDelta::minutes(m as i64), magnitude: d.magnitude });
                cold_shower.push(top < COMFORT_LIMIT);
            }
            let drop = d.magnitude.min(mid - tank.inlet).max(0.0);
            mid -= drop;
            top = (top - tank.draw_top_coupling * drop).max(tank.inlet);
            next_draw += 1;
        }

        top += tank.loss_coefficient * (tank.ambient - top);
        mid += tank.loss_coefficient * (tank.ambient - mid);
        if top >= mid {
            top -= tank.mixing * (top - mid);
        } else {
            // Inverted layers overturn, conserving heat content.
            let f = tank.top_fraction;
            let avg = f * top + (1.0 - f) * mid;
            top += tank.mixing * (avg - top);
            mid += tank.mixing * (avg - mid);
        }
        if on && run > tank.start_delay_minutes {
            top += tank.heat_rate_top * (tank.supply_temperature - top);
            mid += tank.heat_rate_mid * (tank.supply_temperature - mid);
        }
        if !(0.0..=100.0).contains(&top) || !(0.0..=100.0).contains(&mid) || !top.is_finite() || !mid.is_finite() {
            return Err(Error::Config(format!("unstable tank parameters: temperatures ({top:.2}, {mid:.2}) at minute {m}")));
        }
    }

    let mut channels = vec![
        Channel { name: T_MID.into(), values: t_mid },
        Channel { name: T_TOP.into(), values: t_top },
        Channel { name: T_WEIGHTED.into(), values: t_w },
        Channel { name: COMPRESSOR.into(), values: heating.iter().map(|h| if *h { 1.0 } else { 0.0 }).collect() },
    ];
    if scenario.sim.decoys {
        channels.extend(decoy_channels(n, &heating, scenario.sim.seed));
    }
    let frame = SensorFrame::from_columns(start, TimeDelta::minutes(1), channels)?;
    Ok(SimTrace { scenario: scenario.clone(), frame, truth, draws, heating, cold_shower })
}

const CONSTANT_CHANNELS: [(&str, f64); 11] = [
    ("dhw_setpoint", 50.0),
    ("room_setpoint", 21.0),
    ("firmware_version", 3.0),
    ("operating_mode", 1.0),
    ("fault_code", 0.0),
    ("aux_heater", 0.0),
    ("legionella_setpoint", 65.0),
    ("pump_speed_max", 100.0),
    ("display_language", 1.0),
    ("unit_id", 7.0),
    ("tariff_band", 0.0),
];

/// Eight auxiliary channels driven by weather and the compressor, plus the
/// constants above.
fn decoy_channels(n: usize, heating: &[bool], seed: u64) -> Vec<Channel> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let names = ["outdoor_temp", "room_temp", "brine_in", "brine_out", "supply_temp", "return_temp", "flow_rate", "power_kw"];
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); names.len()];
    let mut supply: f64 = 30.0;
    for (m, &on) in heating.iter().enumerate() {
        let day = m as f64 / 1440.0;
        let outdoor = 8.0 - 6.0 * (day / 120.0) + 5.0 * (std::f64::consts::TAU * (day - 0.6)).sin() + 0.3 * noise.sample(&mut rng);
        let room = 21.0 + 0.4 * (std::f64::consts::TAU * (day - 0.7)).sin() + 0.05 * noise.sample(&mut rng);
        supply += if on { 0.15 * (58.0 - supply) } else { 0.01 * (room - supply) };
        let brine_in = if on { 4.0 } else { 8.0 } + 0.2 * noise.sample(&mut rng);
        let brine_out = brine_in - if on { 3.0 } else { 0.2 };
        let ret = supply - if on { 5.0 } else { 0.5 };
        let flow = if on { 0.6 + 0.02 * noise.sample(&mut rng) } else { 0.0 };
        let power = if on { 2.1 + 0.05 * noise.sample(&mut rng) } else { 0.01 };
        let vals = [outdoor, room, brine_in, brine_out, supply, ret, flow.max(0.0), power];
        let res = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01];
        for ((c, v), r) in cols.iter_mut().zip(vals).zip(res) {
            c.push(quantize(v, r));
        }
    }
    let mut out: Vec<Channel> = names.iter().zip(cols).map(|(n, values)| Channel { name: n.to_string(), values }).collect();
    out.extend(CONSTANT_CHANNELS.iter().map(|(name, v)| Channel { name: name.to_string(), values: vec![*v; n] }));
    out
}

impl SimTrace {
    pub fn truth_timestamps(&self) -> Vec<DateTime<Utc>> {
        self.truth.iter().map(|t| t.timestamp).collect()
    }

    /// Heating and comfort tallies over `[from, to)`.
    pub fn ledger(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> EnergyLedger {
        let start = self.frame.start;
        let n = self.heating.len();
        let lo = ((from - start).num_minutes().max(0) as usize).min(n);
        let hi = ((to - start).num_minutes().max(0) as usize).min(n);
        let shower_minutes: Vec<usize> = self.draws.iter().filter(|d| d.shower).map(|d| d.minute).collect();
        let mut heated = 0;
        let mut wasted = 0;
        for m in lo..hi {
            if self.heating[m] {
                heated += 1;
                let k = shower_minutes.partition_point(|s| *s < m);
                if shower_minutes.get(k).is_none_or(|s| *s > m + DEMAND_LOOKAHEAD_MINUTES) {
                    wasted += 1;
                }
            }
        }
        let mut showers = 0;
        let mut violations = 0;
        for (t, cold) in self.truth.iter().zip(&self.cold_shower) {
            if t.timestamp >= from && t.timestamp < to {
                showers += 1;
                violations += usize::from(*cold);
            }
        }
        EnergyLedger { heated_minutes: heated, wasted_minutes: wasted, comfort_violations: violations, showers }
    }

    pub fn write_truth_csv<W: Write>(&self, mut out: W, run_id: Option<&str>) -> Result<()> {
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "magnitude"])?;
        for t in &self.truth {
            w.write_record([format_timestamp(t.timestamp), format!("{:.3}", t.magnitude)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Raw logger output: unchanged cells are left empty, as a change-driven
/// logger would record them.
pub fn write_raw_log<W: Write>(frame: &SensorFrame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.channels.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..frame.len() {
        let mut rec = vec![format_timestamp(frame.timestamp(i))];
        for c in &frame.channels {
            let v = c.values[i];
            if i > 0 && c.values[i - 1].to_bits() == v.to_bits() {
                rec.push(String::new());
            } else {
                rec.push(v.to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EnergyLedger {
    pub heated_minutes: usize,
    /// Heated minutes with no shower in the following two hours.
    pub wasted_minutes: usize,
    pub comfort_violations: usize,
    pub showers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub scores: DetectionScores,
    pub warnings: Vec<String>,
}

/// Greedy one-to-one matching: each detection, in time order, takes the
/// nearest unmatched truth event within `tolerance` (earlier on ties).
pub fn evaluate_detection(detected: &[DateTime<Utc>], truth: &[DateTime<Utc>], tolerance: TimeDelta) -> MatchReport {
    let mut det = detected.to_vec();
    det.sort();
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for d in &det {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, t)| !used[*j] && (**t - *d).abs() <= tolerance)
            .min_by_key(|(j, t)| ((**t - *d).abs(), *j));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    let fp = det.len() - tp;
    let fn_ = truth.len() - tp;
    let scores = f1_far(tp, fp, fn_);
    let mut warnings = Vec::new();
    if det.is_empty() {
        warnings.push("no detections; false alarm rate reported as 0".into());
    }
    if truth.is_empty() {
        warnings.push("no truth events; recall undefined".into());
    }
    MatchReport { true_positives: tp, false_positives: fp, false_negatives: fn_, scores, warnings }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerComparison {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    pub baseline: EnergyLedger,
    pub steered: EnergyLedger,
    /// Relative cut in wasted heated minutes (positive is better).
    pub waste_reduction: f64,
}

/// Compare two runs of the same scenario over `[from, to)`.
pub fn compare_controllers(baseline: &SimTrace, steered: &SimTrace, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<ControllerComparison> {
    if baseline.scenario != steered.scenario {
        return Err(Error::Comparison("traces come from different scenarios or seeds".into()));
    }
    let b = baseline.ledger(from, to);
    let s = steered.ledger(from, to);
    let waste_reduction = if b.wasted_minutes == 0 {
        0.0
    } else {
        1.0 - s.wasted_minutes as f64 / b.wasted_minutes as f64
    };
    Ok(ControllerComparison { from, to, baseline: b, steered: s, waste_reduction })
}
