//! Battery physics shared by every controller: state-of-energy dynamics,
//! the per-interval feasible power interval and projection onto it.
//!
//! Sign convention: positive battery power charges, negative discharges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance (kWh) on state-of-energy bound checks.
pub const SOC_TOL_KWH: f64 = 1e-9;

/// Power and energy ratings of a battery storage system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    /// Maximum discharge power, kW (≤ 0).
    pub p_min_kw: f64,
    /// Maximum charge power, kW (≥ 0).
    pub p_max_kw: f64,
    pub e_min_kwh: f64,
    pub e_max_kwh: f64,
    /// Round-trip split efficiency, applied on both charge and discharge.
    pub eta: f64,
}

impl BatterySpec {
    pub fn new(p_min_kw: f64, p_max_kw: f64, e_min_kwh: f64, e_max_kwh: f64, eta: f64) -> Result<Self> {
        let spec = Self { p_min_kw, p_max_kw, e_min_kwh, e_max_kwh, eta };
        spec.validate()?;
        Ok(spec)
    }

    /// Symmetric power rating, empty-to-full energy window and unit efficiency.
    /// `symmetric(2.0, 4.0)` is the "2-4" size.
    pub fn symmetric(power_kw: f64, energy_kwh: f64) -> Result<Self> {
        Self::new(-power_kw, power_kw, 0.0, energy_kwh, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.p_min_kw, self.p_max_kw, self.e_min_kwh, self.e_max_kwh, self.eta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBattery("non-finite field".into()));
        }
        if !(self.p_min_kw <= 0.0 && 0.0 <= self.p_max_kw) {
            return Err(Error::InvalidBattery(format!(
                "power limits must satisfy p_min ≤ 0 ≤ p_max, got [{}, {}]",
                self.p_min_kw, self.p_max_kw
            )));
        }
        // A zero-width energy window (e_min == e_max) is accepted: it models a
        // battery that can never move, which every controller must handle.
        if !(0.0 <= self.e_min_kwh && self.e_min_kwh <= self.e_max_kwh) {
            return Err(Error::InvalidBattery(format!(
                "energy limits must satisfy 0 ≤ e_min ≤ e_max, got [{}, {}]",
                self.e_min_kwh, self.e_max_kwh
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidBattery(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    /// Initial state of energy used by every controller: half of `e_max`,
    /// pulled into the energy window when the window does not contain it.
    pub fn initial_soc(&self) -> f64 {
        (0.5 * self.e_max_kwh).clamp(self.e_min_kwh, self.e_max_kwh)
    }

    /// "2-4" style label (charge rating kW, capacity kWh).
    pub fn label(&self) -> String {
        format!("{}-{}", self.p_max_kw, self.e_max_kwh)
    }

    pub fn soc_in_bounds(&self, e_kwh: f64) -> bool {
        e_kwh >= self.e_min_kwh - SOC_TOL_KWH && e_kwh <= self.e_max_kwh + SOC_TOL_KWH
    }
}

/// Closed interval of admissible battery powers for one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleInterval {
    pub lo_kw: f64,
    pub hi_kw: f64,
}

impl FeasibleInterval {
    pub fn new(lo_kw: f64, hi_kw: f64) -> Self {
        debug_assert!(lo_kw <= hi_kw, "empty interval [{lo_kw}, {hi_kw}]");
        Self { lo_kw, hi_kw }
    }

    /// The power-rating box, ignoring energy limits.
    pub fn ratings(spec: &BatterySpec) -> Self {
        Self::new(spec.p_min_kw, spec.p_max_kw)
    }

    pub fn contains(&self, p_kw: f64) -> bool {
        self.lo_kw <= p_kw && p_kw <= self.hi_kw
    }

    pub fn is_subset_of(&self, other: &FeasibleInterval) -> bool {
        other.lo_kw <= self.lo_kw && self.hi_kw <= other.hi_kw
    }
}

/// State of energy after applying `p_b` for `dt` hours.
///
/// Charging stores `eta * p_b * dt`; discharging draws `p_b * dt / eta`.
pub fn step_soc(e_prev: f64, p_b: f64, dt: f64, spec: &BatterySpec) -> f64 {
    if p_b >= 0.0 {
        e_prev + spec.eta * p_b * dt
    } else {
        e_prev + p_b * dt / spec.eta
    }
}

/// [`step_soc`] that rejects results outside the energy window (± [`SOC_TOL_KWH`]).
/// A violation means an upstream controller skipped the projection.
pub fn checked_step_soc(e_prev: f64, p_b: f64, dt: f64, spec: &BatterySpec, step: usize) -> Result<f64> {
    let e = step_soc(e_prev, p_b, dt, spec);
    if spec.soc_in_bounds(e) {
        Ok(e)
    } else {
        Err(Error::SocViolation { step, e_kwh: e, e_min: spec.e_min_kwh, e_max: spec.e_max_kwh })
    }
}

/// Intersection of the power-rating box with the powers that keep the next
/// state of energy inside `[e_min, e_max]`.
///
/// Always contains 0: idling is legal from any in-bounds state.
pub fn feasible_set(e_prev: f64, dt: f64, spec: &BatterySpec) -> FeasibleInterval {
    let energy_lo = (spec.e_min_kwh - e_prev) * spec.eta / dt;
    let energy_hi = (spec.e_max_kwh - e_prev) / (spec.eta * dt);
    let lo = spec.p_min_kw.max(energy_lo).min(0.0);
    let hi = spec.p_max_kw.min(energy_hi).max(0.0);
    FeasibleInterval::new(lo, hi)
}

/// Euclidean projection of `y` onto `s` (a clamp).
pub fn project(y: f64, s: &FeasibleInterval) -> f64 {
    if y <= s.lo_kw {
        s.lo_kw
    } else if y > s.hi_kw {
        s.hi_kw
    } else {
        y
    }
}

/// Restricts `s` so the next action cannot reverse the sign of `p_b_prev`.
pub fn sign_restricted_set(s: &FeasibleInterval, p_b_prev: f64) -> FeasibleInterval {
    if p_b_prev < 0.0 {
        FeasibleInterval::new(s.lo_kw, s.hi_kw.min(0.0))
    } else if p_b_prev > 0.0 {
        FeasibleInterval::new(s.lo_kw.max(0.0), s.hi_kw)
    } else {
        *s
    }
}
