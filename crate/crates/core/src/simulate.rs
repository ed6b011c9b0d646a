//! Closed-loop driver: runs a policy over a profile and records the
//! resulting battery, grid and SoC trajectories.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::battery::{checked_step_soc, feasible_set, project, step_soc, BatterySpec, SOC_TOL_KWH};
use crate::controllers::{greedy_projection_step, mos_step, occam_step, rolling_horizon_step, HyperParams};
use crate::error::{Error, Result};
use crate::forecast::persistence;
use crate::profile::PowerProfile;
use crate::qp::{solve_horizon, HorizonProblem, HorizonSolution, SolverSettings};

/// Step-size sequence for the plain projected-gradient controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `alpha_t = t^(-1/2)`, t counted from the first decision.
    InverseSqrt,
}

impl StepSchedule {
    pub fn alpha(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::InverseSqrt => 1.0 / (t.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollingQpConfig {
    pub horizon_steps: usize,
    pub solver: SolverSettings,
    pub warm_start: bool,
}

impl Default for RollingQpConfig {
    fn default() -> Self {
        Self { horizon_steps: 48, solver: SolverSettings::default(), warm_start: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Occam,
    Greedy(StepSchedule),
    Mos(HyperParams),
    RollingQp(RollingQpConfig),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Occam => "occam",
            Policy::Greedy(_) => "greedy",
            Policy::Mos(_) => "mos",
            Policy::RollingQp(_) => "rolling_qp",
        }
    }
}

/// Per-interval result of a closed-loop run. `e_kwh[t]` is the state at the
/// end of interval `t`; the state before the first interval is `e_init_kwh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchTrace {
    pub p_b_kw: Vec<f64>,
    pub p_g_kw: Vec<f64>,
    pub e_kwh: Vec<f64>,
    pub dt_hours: f64,
    pub e_init_kwh: f64,
}

impl DispatchTrace {
    pub fn len(&self) -> usize {
        self.p_b_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_b_kw.is_empty()
    }

    /// Checks lengths, power ratings, SoC bounds, SoC dynamics and the exact
    /// grid balance `p_g = p_d + p_b - p_pv`.
    pub fn validate(&self, profile: &PowerProfile, spec: &BatterySpec) -> Result<()> {
        let n = profile.len();
        if self.p_b_kw.len() != n || self.p_g_kw.len() != n || self.e_kwh.len() != n {
            return Err(Error::LengthMismatch(format!(
                "trace lengths {}/{}/{} vs profile {n}",
                self.p_b_kw.len(),
                self.p_g_kw.len(),
                self.e_kwh.len()
            )));
        }
        let mut e_prev = self.e_init_kwh;
        for t in 0..n {
            let p_b = self.p_b_kw[t];
            if !(p_b >= spec.p_min_kw - 1e-12 && p_b <= spec.p_max_kw + 1e-12) {
                return Err(Error::InvalidProfile(format!("step {t}: p_b {p_b} outside power ratings")));
            }
            let e = self.e_kwh[t];
            if !spec.soc_in_bounds(e) {
                return Err(Error::SocViolation { step: t, e_kwh: e, e_min: spec.e_min_kwh, e_max: spec.e_max_kwh });
            }
            if (step_soc(e_prev, p_b, self.dt_hours, spec) - e).abs() > SOC_TOL_KWH {
                return Err(Error::InvalidProfile(format!("step {t}: SoC does not follow the dynamics")));
            }
            if self.p_g_kw[t] != profile.demand_kw[t] + p_b - profile.pv_kw[t] {
                return Err(Error::InvalidProfile(format!("step {t}: grid balance violated")));
            }
            e_prev = e;
        }
        Ok(())
    }
}

/// Runs `policy` over `profile` from `e = spec.initial_soc()`.
///
/// The first interval is idle. Afterwards occam/greedy/mos see observations
/// up to the previous interval only; rolling_qp sees a persistence forecast
/// built from the same history and idles until a full horizon of history
/// exists. Grid power uses the realized demand and PV.
pub fn simulate(profile: &PowerProfile, spec: &BatterySpec, policy: &Policy) -> Result<DispatchTrace> {
    profile.validate()?;
    spec.validate()?;
    if let Policy::Mos(hp) = policy {
        hp.validate()?;
    }
    let n = profile.len();
    let dt = profile.dt_hours;
    let day = (24.0 / dt).round().max(1.0) as usize;
    let (demand, pv) = (&profile.demand_kw, &profile.pv_kw);

    let e_init = spec.initial_soc();
    let mut p_b_kw = Vec::with_capacity(n);
    let mut p_g_kw = Vec::with_capacity(n);
    let mut e_kwh = Vec::with_capacity(n);
    let mut e = e_init;
    let mut last_solution: Option<HorizonSolution> = None;

    for t in 0..n {
        let p_b = if t == 0 {
            0.0
        } else {
            let (p_b_prev, p_g_prev) = (p_b_kw[t - 1], p_g_kw[t - 1]);
            match policy {
                Policy::Occam => occam_step(demand[t - 1], pv[t - 1], e, dt, spec).0,
                Policy::Greedy(schedule) => {
                    greedy_projection_step(p_b_prev, p_g_prev, schedule.alpha(t), &feasible_set(e, dt, spec))
                }
                Policy::Mos(hp) => {
                    let yesterday = (t >= day).then(|| p_b_kw[t - day]);
                    mos_step(p_b_prev, p_g_prev, yesterday, e, hp, dt, spec).0
                }
                Policy::RollingQp(cfg) => {
                    if t < cfg.horizon_steps {
                        0.0
                    } else {
                        let forecast = persistence(&demand[..t], &pv[..t], cfg.horizon_steps)?;
                        let warm = match (&last_solution, cfg.warm_start) {
                            (Some(prev), true) => Some(prev.shifted_warm_start()),
                            _ => None,
                        };
                        let (p, solution) = rolling_horizon_step(&forecast, e, dt, spec, &cfg.solver, warm.as_ref())
                            .map_err(|err| match err {
                                Error::NotConverged { iterations, .. } => Error::NotConverged { step: t, iterations },
                                other => other,
                            })?;
                        last_solution = Some(solution);
                        // The solution is feasible for `e`; the clamp only
                        // absorbs rounding.
                        project(p, &feasible_set(e, dt, spec))
                    }
                }
            }
        };
        e = checked_step_soc(e, p_b, dt, spec, t)?;
        p_b_kw.push(p_b);
        p_g_kw.push(demand[t] + p_b - pv[t]);
        e_kwh.push(e);
    }
    Ok(DispatchTrace { p_b_kw, p_g_kw, e_kwh, dt_hours: dt, e_init_kwh: e_init })
}

/// Perfect-foresight optimum over the whole profile (one horizon problem
/// from the standard initial state), as a dispatch trace.
pub fn clairvoyant(
    profile: &PowerProfile,
    spec: &BatterySpec,
    settings: &SolverSettings,
) -> Result<(DispatchTrace, HorizonSolution)> {
    profile.validate()?;
    let e_init = spec.initial_soc();
    let problem =
        HorizonProblem { net_base_kw: profile.net_base(), e0_kwh: e_init, dt_hours: profile.dt_hours, spec: *spec };
    let solution = solve_horizon(&problem, settings, None)?;
    if !solution.converged {
        return Err(Error::NotConverged { step: 0, iterations: solution.iterations });
    }
    let mut e = e_init;
    let mut e_kwh = Vec::with_capacity(profile.len());
    let mut p_g_kw = Vec::with_capacity(profile.len());
    for (t, &p_b) in solution.p_b_kw.iter().enumerate() {
        e = checked_step_soc(e, p_b, profile.dt_hours, spec, t)?;
        e_kwh.push(e);
        p_g_kw.push(profile.demand_kw[t] + p_b - profile.pv_kw[t]);
    }
    let trace = DispatchTrace {
        p_b_kw: solution.p_b_kw.clone(),
        p_g_kw,
        e_kwh,
        dt_hours: profile.dt_hours,
        e_init_kwh: e_init,
    };
    Ok((trace, solution))
}

/// Writes `t,p_d,p_pv,p_b,p_g,e` (t = interval start, epoch seconds).
pub fn write_trace<W: Write>(writer: W, profile: &PowerProfile, trace: &DispatchTrace) -> Result<()> {
    let step_s = (profile.dt_hours * 3600.0).round() as i64;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "p_d", "p_pv", "p_b", "p_g", "e"])?;
    for t in 0..trace.len() {
        w.write_record([
            (profile.start_epoch + t as i64 * step_s).to_string(),
            profile.demand_kw[t].to_string(),
            profile.pv_kw[t].to_string(),
            trace.p_b_kw[t].to_string(),
            trace.p_g_kw[t].to_string(),
            trace.e_kwh[t].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_trace(path: impl AsRef<Path>, profile: &PowerProfile, trace: &DispatchTrace) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(std::io::BufWriter::new(file), profile, trace)
}

/// Reads a trace CSV back into the profile it was run on and the trace.
/// The pre-run state is recovered by inverting the first interval's step.
pub fn read_trace<R: Read>(reader: R, spec: &BatterySpec) -> Result<(PowerProfile, DispatchTrace)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cols: [Vec<f64>; 6] = Default::default();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (c, col) in cols.iter_mut().enumerate() {
            let raw = record.get(c).ok_or_else(|| Error::BadRow { row, message: format!("missing field {c}") })?;
            let v: f64 = raw.parse().map_err(|_| Error::BadRow { row, message: format!("cannot parse `{raw}`") })?;
            col.push(v);
        }
    }
    let [t, p_d, p_pv, p_b, p_g, e] = cols;
    if t.len() < 2 {
        return Err(Error::InvalidProfile("trace needs at least two rows".into()));
    }
    let dt_hours = (t[1] - t[0]) / 3600.0;
    let profile = PowerProfile::new(t[0] as i64, dt_hours, p_d, p_pv)?;
    let e_init = if p_b[0] >= 0.0 { e[0] - spec.eta * p_b[0] * dt_hours } else { e[0] - p_b[0] * dt_hours / spec.eta };
    let trace = DispatchTrace { p_b_kw: p_b, p_g_kw: p_g, e_kwh: e, dt_hours, e_init_kwh: e_init };
    Ok((profile, trace))
}
