//! Demand/PV power profiles: CSV ingestion, resampling and a seeded
//! synthetic generator.
//!
//! CSV layout: a header row with a timestamp column (ISO-8601 or epoch
//! seconds) and two power columns in kW. Timestamps must be strictly
//! increasing and uniformly spaced by a whole number of seconds.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned demand and PV series at a uniform interval length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    /// Unix seconds at the start of the first interval.
    pub start_epoch: i64,
    pub dt_hours: f64,
    pub demand_kw: Vec<f64>,
    pub pv_kw: Vec<f64>,
}

impl PowerProfile {
    pub fn new(start_epoch: i64, dt_hours: f64, demand_kw: Vec<f64>, pv_kw: Vec<f64>) -> Result<Self> {
        let p = Self { start_epoch, dt_hours, demand_kw, pv_kw };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_hours.is_finite() && self.dt_hours > 0.0) {
            return Err(Error::InvalidProfile(format!("dt_hours must be > 0, got {}", self.dt_hours)));
        }
        if self.demand_kw.len() != self.pv_kw.len() {
            return Err(Error::InvalidProfile(format!(
                "demand has {} values, pv has {}",
                self.demand_kw.len(),
                self.pv_kw.len()
            )));
        }
        if self.demand_kw.is_empty() {
            return Err(Error::InvalidProfile("profile is empty".into()));
        }
        for (row, (&d, &pv)) in self.demand_kw.iter().zip(&self.pv_kw).enumerate() {
            check_power(row, "demand_kw", d)?;
            check_power(row, "pv_kw", pv)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.demand_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand_kw.is_empty()
    }

    /// Intervals per day, when `dt_hours` divides 24 h.
    pub fn steps_per_day(&self) -> Option<usize> {
        steps_per_day(self.dt_hours)
    }

    /// `demand - pv` per interval (positive = import before the battery acts).
    pub fn net_base(&self) -> Vec<f64> {
        self.demand_kw.iter().zip(&self.pv_kw).map(|(d, pv)| d - pv).collect()
    }

    /// Intervals `[start, end)` as a new profile.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidProfile(format!(
                "slice [{start}, {end}) out of range for length {}",
                self.len()
            )));
        }
        Ok(Self {
            start_epoch: self.start_epoch + (start as f64 * self.dt_hours * 3600.0).round() as i64,
            dt_hours: self.dt_hours,
            demand_kw: self.demand_kw[start..end].to_vec(),
            pv_kw: self.pv_kw[start..end].to_vec(),
        })
    }

    /// Splits after the first `train_days` whole days.
    pub fn split_days(&self, train_days: usize) -> Result<(Self, Self)> {
        let spd = self
            .steps_per_day()
            .ok_or_else(|| Error::InvalidProfile(format!("dt {} h does not divide a day", self.dt_hours)))?;
        let cut = train_days * spd;
        if cut == 0 || cut >= self.len() {
            return Err(Error::InvalidProfile(format!(
                "cannot split {} intervals after {train_days} day(s)",
                self.len()
            )));
        }
        Ok((self.slice(0, cut)?, self.slice(cut, self.len())?))
    }
}

fn check_power(row: usize, column: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidValue { row, column: column.to_string(), value: v });
    }
    Ok(())
}

/// `round(24 / dt)` when that is an integer (to 1e-9), else `None`.
pub fn steps_per_day(dt_hours: f64) -> Option<usize> {
    let ratio = 24.0 / dt_hours;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= 1e-9 * rounded {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Names of the three CSV columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub demand: String,
    pub pv: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { timestamp: "timestamp".into(), demand: "demand_kw".into(), pv: "pv_kw".into() }
    }
}

pub fn load_profile(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<PowerProfile> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_profile(file, columns)
}

pub fn read_profile<R: Read>(reader: R, columns: &ColumnMap) -> Result<PowerProfile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find =
        |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let ts_col = find(&columns.timestamp)?;
    let d_col = find(&columns.demand)?;
    let pv_col = find(&columns.pv)?;

    let mut stamps = Vec::new();
    let mut demand = Vec::new();
    let mut pv = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field =
            |col: usize| record.get(col).ok_or_else(|| Error::BadRow { row, message: format!("missing field {col}") });
        stamps.push(parse_timestamp(field(ts_col)?).ok_or_else(|| Error::BadRow {
            row,
            message: format!("unparseable timestamp `{}`", field(ts_col).unwrap_or_default()),
        })?);
        let d = parse_power(row, &columns.demand, field(d_col)?)?;
        let p = parse_power(row, &columns.pv, field(pv_col)?)?;
        demand.push(d);
        pv.push(p);
    }
    if stamps.is_empty() {
        return Err(Error::InvalidProfile("no data rows".into()));
    }
    if stamps.len() < 2 {
        return Err(Error::InvalidProfile("need at least two rows to infer the interval length".into()));
    }
    let spacing = stamps[1] - stamps[0];
    if spacing <= 0 {
        return Err(Error::BadRow { row: 1, message: "timestamps must be strictly increasing".into() });
    }
    for (row, w) in stamps.windows(2).enumerate() {
        let found = w[1] - w[0];
        if found != spacing {
            return Err(Error::NonUniformSpacing { row: row + 1, expected_s: spacing, found_s: found });
        }
    }
    PowerProfile::new(stamps[0], spacing as f64 / 3600.0, demand, pv)
}

fn parse_power(row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.parse().map_err(|_| Error::BadRow { row, message: format!("{column}: cannot parse `{raw}`") })?;
    check_power(row, column, v)?;
    Ok(v)
}

/// Epoch seconds, RFC 3339, or a naive `YYYY-MM-DD[ T]HH:MM[:SS]` taken as UTC.
fn parse_timestamp(raw: &str) -> Option<i64> {
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Writes `timestamp,demand_kw,pv_kw` with epoch-second timestamps and
/// shortest round-trip float formatting.
pub fn write_profile<W: Write>(writer: W, p: &PowerProfile) -> Result<()> {
    let step_s = (p.dt_hours * 3600.0).round() as i64;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "demand_kw", "pv_kw"])?;
    for (i, (d, pv)) in p.demand_kw.iter().zip(&p.pv_kw).enumerate() {
        let ts = p.start_epoch + i as i64 * step_s;
        w.write_record([ts.to_string(), d.to_string(), pv.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_profile(path: impl AsRef<Path>, p: &PowerProfile) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_profile(std::io::BufWriter::new(file), p)
}

/// Aggregates to a coarser interval by averaging whole buckets.
pub fn resample(p: &PowerProfile, target_dt_hours: f64) -> Result<PowerProfile> {
    let ratio = target_dt_hours / p.dt_hours;
    let factor = ratio.round();
    if factor.is_nan() || factor < 1.0 || (ratio - factor).abs() > 1e-9 * factor {
        return Err(Error::Resample(format!(
            "target {target_dt_hours} h is not an integer multiple of {} h",
            p.dt_hours
        )));
    }
    let factor = factor as usize;
    if factor == 1 {
        return Ok(p.clone());
    }
    if !p.len().is_multiple_of(factor) {
        return Err(Error::Resample(format!(
            "{} values leave a partial bucket of {} at factor {factor}",
            p.len(),
            p.len() % factor
        )));
    }
    let mean = |xs: &[f64]| xs.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect::<Vec<_>>();
    PowerProfile::new(p.start_epoch, target_dt_hours, mean(&p.demand_kw), mean(&p.pv_kw))
}

/// Parameters of the synthetic household generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub days: usize,
    pub dt_hours: f64,
    pub demand_base_kw: f64,
    pub pv_peak_kw: f64,
    pub noise_std_kw: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { days: 30, dt_hours: 0.5, demand_base_kw: 0.6, pv_peak_kw: 3.0, noise_std_kw: 0.2, seed: 7 }
    }
}

/// Start of the synthetic series: 2024-03-01T00:00:00Z.
pub const SYNTH_START_EPOCH: i64 = 1_709_251_200;

/// Demand multiplier over the day: a morning bump at 07:30 and a larger
/// evening bump at 19:00, on top of a flat base of 1.
pub fn diurnal_demand_shape(hour: f64) -> f64 {
    let bump = |centre: f64, width: f64, height: f64| {
        let d = hour - centre;
        height * (-(d * d) / (2.0 * width * width)).exp()
    };
    1.0 + bump(7.5, 1.5, 0.8) + bump(19.0, 2.0, 1.5)
}

/// Clear-sky PV fraction: a half-sine between 06:00 and 18:00, zero at night.
pub fn clear_sky_fraction(hour: f64) -> f64 {
    if (6.0..=18.0).contains(&hour) {
        (PI * (hour - 6.0) / 12.0).sin().max(0.0)
    } else {
        0.0
    }
}

/// Deterministic synthetic profile.
///
/// Demand is `base * diurnal_demand_shape + N(0, σ)`; PV is
/// `peak * clear_sky_fraction + N(0, σ)` during daylight and exactly zero at
/// night. Both are clipped at zero and evaluated at interval midpoints.
pub fn synth_profile(params: &SynthParams) -> Result<PowerProfile> {
    let SynthParams { days, dt_hours, demand_base_kw, pv_peak_kw, noise_std_kw, seed } = *params;
    let spd = steps_per_day(dt_hours)
        .ok_or_else(|| Error::InvalidProfile(format!("dt {dt_hours} h does not divide 24 h")))?;
    if days == 0 {
        return Err(Error::InvalidProfile("days must be ≥ 1".into()));
    }
    for (name, v) in [("demand_base_kw", demand_base_kw), ("pv_peak_kw", pv_peak_kw), ("noise_std_kw", noise_std_kw)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidProfile(format!("{name} must be finite and ≥ 0, got {v}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std_kw).map_err(|e| Error::InvalidProfile(e.to_string()))?;
    let n = days * spd;
    let mut demand = Vec::with_capacity(n);
    let mut pv = Vec::with_capacity(n);
    for i in 0..n {
        let hour = ((i % spd) as f64 + 0.5) * dt_hours;
        // Both draws happen every interval so the stream stays aligned.
        let (zd, zp) = (noise.sample(&mut rng), noise.sample(&mut rng));
        demand.push((demand_base_kw * diurnal_demand_shape(hour) + zd).max(0.0));
        let clear = pv_peak_kw * clear_sky_fraction(hour);
        pv.push(if clear > 0.0 { (clear + zp).max(0.0) } else { 0.0 });
    }
    PowerProfile::new(SYNTH_START_EPOCH, dt_hours, demand, pv)
}
