//! Scores for dispatch traces.
//!
//! Sums are over intervals with no `dt` scaling. Cycling is equivalent full
//! cycles: absolute energy throughput over twice the capacity. The daily peak
//! is the mean over whole days (aligned to the profile start) of the largest
//! absolute grid power within each day.

use serde::{Deserialize, Serialize};

use crate::battery::BatterySpec;
use crate::error::{Error, Result};
use crate::profile::PowerProfile;
use crate::simulate::DispatchTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Σ p_g², kW².
    pub l2_sq: f64,
    /// Σ |p_g|, kW.
    pub l1: f64,
    pub cycles: f64,
    pub avg_daily_peak_kw: f64,
    /// The trace is shorter than one day; the peak covers that partial day.
    pub partial_day: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regret: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

pub fn compute_metrics(trace: &DispatchTrace, e_max_kwh: f64) -> MetricsReport {
    let l2_sq = trace.p_g_kw.iter().map(|g| g * g).sum();
    let l1 = trace.p_g_kw.iter().map(|g| g.abs()).sum();
    let throughput: f64 = trace.p_b_kw.iter().map(|p| p.abs() * trace.dt_hours).sum();
    let cycles = if e_max_kwh > 0.0 { throughput / (2.0 * e_max_kwh) } else { 0.0 };

    let day = (24.0 / trace.dt_hours).round().max(1.0) as usize;
    let peak = |xs: &[f64]| xs.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let whole_days = trace.p_g_kw.len() / day;
    let (avg_daily_peak_kw, partial_day) = if whole_days == 0 {
        (peak(&trace.p_g_kw), true)
    } else {
        let total: f64 = trace.p_g_kw.chunks_exact(day).map(peak).sum();
        (total / whole_days as f64, false)
    };
    MetricsReport { l2_sq, l1, cycles, avg_daily_peak_kw, partial_day, regret: None, wall_time_s: None }
}

/// Best constant battery power in hindsight over the power-rating box,
/// ignoring energy limits, and its cost `Σ (net + x)²`.
pub fn hindsight_fixed_optimum(net_base_kw: &[f64], p_min_kw: f64, p_max_kw: f64) -> Result<(f64, f64)> {
    if net_base_kw.is_empty() {
        return Err(Error::LengthMismatch("empty net demand".into()));
    }
    let mean = net_base_kw.iter().sum::<f64>() / net_base_kw.len() as f64;
    let x_star = (-mean).clamp(p_min_kw, p_max_kw);
    let cost = net_base_kw.iter().map(|n| (n + x_star) * (n + x_star)).sum();
    Ok((x_star, cost))
}

/// Cumulative cost of the trace minus the hindsight fixed-action cost.
/// Negative values are possible: the comparator is restricted to constant
/// actions.
pub fn regret(trace: &DispatchTrace, profile: &PowerProfile, spec: &BatterySpec) -> Result<f64> {
    if trace.p_g_kw.len() != profile.len() {
        return Err(Error::LengthMismatch(format!("trace {} vs profile {}", trace.p_g_kw.len(), profile.len())));
    }
    let (_, best) = hindsight_fixed_optimum(&profile.net_base(), spec.p_min_kw, spec.p_max_kw)?;
    let cost: f64 = trace.p_g_kw.iter().map(|g| g * g).sum();
    Ok(cost - best)
}
