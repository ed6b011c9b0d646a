//! Single-interval decision rules.
//!
//! All rules act on observations from the previous interval only; the
//! closed-loop driver in [`crate::simulate`] owns the state between calls.

use serde::{Deserialize, Serialize};

use crate::battery::{feasible_set, project, sign_restricted_set, step_soc, BatterySpec, FeasibleInterval};
use crate::error::{Error, Result};
use crate::forecast::Forecast;
use crate::qp::{solve_horizon, HorizonProblem, HorizonSolution, SolverSettings, WarmStart};

/// Momentum controller tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Gradient step size.
    pub alpha: f64,
    /// Weight of the action-momentum term `e^(-|p_b|)`.
    pub mu: f64,
    /// Pull towards the decision taken at the same time one day earlier.
    pub kappa: f64,
}

impl HyperParams {
    pub fn new(alpha: f64, mu: f64, kappa: f64) -> Result<Self> {
        let hp = Self { alpha, mu, kappa };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidHyperParams(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::InvalidHyperParams(format!("mu must be ≥ 0, got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::InvalidHyperParams(format!("kappa must be in [0, 1), got {}", self.kappa)));
        }
        Ok(())
    }

    /// Published tuning results for the nine reference sizes
    /// (charge rating kW, capacity kWh). `None` for any other size.
    pub fn reference(p_max_kw: f64, e_max_kwh: f64) -> Option<Self> {
        REFERENCE_HYPERPARAMS
            .iter()
            .find(|(p, e, _)| *p == p_max_kw && *e == e_max_kwh)
            .map(|&(_, _, (alpha, mu, kappa))| Self { alpha, mu, kappa })
    }
}

/// `(kW, kWh, (alpha, mu, kappa))`.
pub const REFERENCE_HYPERPARAMS: [(f64, f64, (f64, f64, f64)); 9] = [
    (2.0, 4.0, (0.051, 0.236, 0.128)),
    (2.0, 8.0, (0.132, 0.761, 0.278)),
    (2.0, 12.0, (0.22, 1.743, 0.526)),
    (4.0, 8.0, (0.083, 0.876, 0.262)),
    (4.0, 16.0, (0.15, 1.87, 0.463)),
    (4.0, 24.0, (0.218, 2.3, 0.518)),
    (6.0, 12.0, (0.132, 1.775, 0.442)),
    (6.0, 24.0, (0.217, 2.293, 0.517)),
    (6.0, 36.0, (0.227, 2.3233, 0.5)),
];

/// Rule-based self-consumption: put last interval's PV surplus (or deficit)
/// into the battery, clipped to what the ratings and stored energy allow.
pub fn occam_step(p_d_prev: f64, p_pv_prev: f64, e_prev: f64, dt: f64, spec: &BatterySpec) -> (f64, f64) {
    let residual = p_pv_prev - p_d_prev;
    let p_b = project(residual, &feasible_set(e_prev, dt, spec));
    (p_b, step_soc(e_prev, p_b, dt, spec))
}

/// One projected online-gradient step on `f(p) = p_g²`, whose gradient at
/// the previous decision is `2 * p_g_prev`.
pub fn greedy_projection_step(p_b_prev: f64, p_g_prev: f64, alpha_t: f64, set: &FeasibleInterval) -> f64 {
    project(p_b_prev - alpha_t * 2.0 * p_g_prev, set)
}

/// (Sub)gradient of `p_g² + mu * e^(-|p_b|)` with respect to the battery
/// power, evaluated at the previous interval; zero is used at the kink.
pub fn mos_gradient(p_g_prev: f64, p_b_prev: f64, mu: f64) -> f64 {
    let momentum = if p_b_prev > 0.0 {
        -(-p_b_prev).exp()
    } else if p_b_prev < 0.0 {
        p_b_prev.exp()
    } else {
        0.0
    };
    2.0 * p_g_prev + mu * momentum
}

/// Momentum step: gradient update blended with yesterday's decision,
/// projected onto the feasible interval restricted to keep the sign of the
/// previous action. Without a previous-day decision the blend is skipped.
pub fn mos_step(
    p_b_prev: f64,
    p_g_prev: f64,
    p_b_yesterday: Option<f64>,
    e_prev: f64,
    hp: &HyperParams,
    dt: f64,
    spec: &BatterySpec,
) -> (f64, f64) {
    let step = hp.alpha * mos_gradient(p_g_prev, p_b_prev, hp.mu);
    let raw = match p_b_yesterday {
        Some(y) => (1.0 - hp.kappa) * p_b_prev - step + hp.kappa * y,
        None => p_b_prev - step,
    };
    let set = sign_restricted_set(&feasible_set(e_prev, dt, spec), p_b_prev);
    let p_b = project(raw, &set);
    (p_b, step_soc(e_prev, p_b, dt, spec))
}

/// Solves the horizon problem on `forecast` from state `e_prev` and keeps
/// only the first interval's decision.
///
/// Non-convergence is an error ([`Error::NotConverged`] with `step = 0`;
/// the driver fills in the interval index).
pub fn rolling_horizon_step(
    forecast: &Forecast,
    e_prev: f64,
    dt: f64,
    spec: &BatterySpec,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<(f64, HorizonSolution)> {
    let problem = HorizonProblem { net_base_kw: forecast.net_base(), e0_kwh: e_prev, dt_hours: dt, spec: *spec };
    let solution = solve_horizon(&problem, settings, warm)?;
    if !solution.converged {
        return Err(Error::NotConverged { step: 0, iterations: solution.iterations });
    }
    Ok((solution.p_b_kw[0], solution))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_2_4() -> BatterySpec {
        BatterySpec::symmetric(2.0, 4.0).unwrap()
    }

    /// Literal transcription of the rule-based controller with its explicit
    /// energy-limit branches, used as an oracle for `occam_step`.
    fn occam_branches(p_d: f64, p_pv: f64, e_prev: f64, dt: f64, s: &BatterySpec) -> (f64, f64) {
        let r = p_pv - p_d;
        let p_b = if r >= 0.0 {
            if e_prev + s.eta * r * dt <= s.e_max_kwh {
                r
            } else {
                (s.e_max_kwh - e_prev) / (s.eta * dt)
            }
        } else if e_prev + r * dt / s.eta >= s.e_min_kwh {
            r
        } else {
            (s.e_min_kwh - e_prev) * s.eta / dt
        };
        let p_b = p_b.clamp(s.p_min_kw, s.p_max_kw);
        (p_b, step_soc(e_prev, p_b, dt, s))
    }

    #[test]
    fn occam_energy_limited_charge() {
        let (p, e) = occam_step(1.0, 3.0, 3.5, 0.5, &spec_2_4());
        assert_eq!(p, 1.0);
        assert_eq!(e, 4.0);
    }

    #[test]
    fn occam_energy_limited_discharge() {
        let (p, e) = occam_step(1.0, 0.0, 0.2, 0.5, &spec_2_4());
        assert!((p + 0.4).abs() < 1e-12);
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn occam_zero_residual() {
        for e0 in [0.0, 1.3, 4.0] {
            assert_eq!(occam_step(2.0, 2.0, e0, 0.5, &spec_2_4()), (0.0, e0));
        }
    }

    #[test]
    fn occam_matches_branch_transcription() {
        let specs = [spec_2_4(), BatterySpec::new(-3.0, 1.5, 0.5, 6.0, 0.92).unwrap()];
        for s in &specs {
            for i in 0..40 {
                for j in 0..40 {
                    let p_d = i as f64 * 0.15;
                    let p_pv = j as f64 * 0.17;
                    let e = s.e_min_kwh + (s.e_max_kwh - s.e_min_kwh) * ((i * 7 + j * 3) % 40) as f64 / 39.0;
                    let (a, ea) = occam_step(p_d, p_pv, e, 0.5, s);
                    let (b, eb) = occam_branches(p_d, p_pv, e, 0.5, s);
                    assert!((a - b).abs() < 1e-12 && (ea - eb).abs() < 1e-12, "{p_d} {p_pv} {e}");
                }
            }
        }
    }

    #[test]
    fn greedy_examples() {
        let s = FeasibleInterval::new(-2.0, 1.0);
        assert_eq!(greedy_projection_step(0.0, -2.0, 0.5, &s), 1.0);
        assert_eq!(greedy_projection_step(0.5, 0.0, 0.37, &s), 0.5);
        assert_eq!(greedy_projection_step(0.0, 1.0, 0.25, &FeasibleInterval::new(-2.0, 2.0)), -0.5);
    }

    #[test]
    fn greedy_half_step_equals_occam() {
        // p_d=1, p_pv=3 with idle previous action: p_g_prev = -2.
        let spec = spec_2_4();
        let set = feasible_set(3.5, 0.5, &spec);
        let (occam, _) = occam_step(1.0, 3.0, 3.5, 0.5, &spec);
        assert_eq!(greedy_projection_step(0.0, -2.0, 0.5, &set), occam);
    }

    #[test]
    fn mos_gradient_cases() {
        assert!((mos_gradient(0.0, 0.5, 1.0) + (-0.5f64).exp()).abs() < 1e-15);
        assert!((mos_gradient(0.0, 0.5, 1.0) + 0.606_530_659_712_633_4).abs() < 1e-12);
        assert_eq!(mos_gradient(0.0, 0.0, 5.0), 0.0);
        assert_eq!(mos_gradient(1.0, 0.0, 0.0), 2.0);
        assert!((mos_gradient(0.0, -0.5, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mos_degenerate_matches_greedy() {
        let spec = spec_2_4();
        let hp = HyperParams::new(0.3, 0.0, 0.0).unwrap();
        for &(p_g, e) in &[(-2.0, 3.5), (1.0, 2.0), (3.0, 0.2)] {
            let (p, _) = mos_step(0.0, p_g, None, e, &hp, 0.5, &spec);
            let g = greedy_projection_step(0.0, p_g, 0.3, &feasible_set(e, 0.5, &spec));
            assert_eq!(p, g);
            let (p_y, _) = mos_step(0.0, p_g, Some(1.7), e, &hp, 0.5, &spec);
            assert_eq!(p_y, g);
        }
    }

    #[test]
    fn mos_blocks_sign_flip() {
        let spec = spec_2_4();
        let hp = HyperParams::new(0.5, 0.0, 0.0).unwrap();
        // Large export pushes the raw update positive.
        let (p, e) = mos_step(-0.5, -4.0, None, 2.0, &hp, 0.5, &spec);
        assert_eq!(p, 0.0);
        assert_eq!(e, 2.0);
    }

    #[test]
    fn mos_hand_evaluated() {
        let spec = BatterySpec::symmetric(2.0, 8.0).unwrap();
        let hp = HyperParams::new(0.1, 1.0, 0.5).unwrap();
        let (p, _) = mos_step(1.0, -1.0, Some(1.0), 4.0, &hp, 0.5, &spec);
        let expected = 0.5 * 1.0 - 0.1 * (-2.0 - (-1.0f64).exp()) + 0.5 * 1.0;
        assert!((expected - 1.236_787_944_117_144).abs() < 1e-12);
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn reference_table_lookup() {
        assert_eq!(HyperParams::reference(2.0, 4.0), Some(HyperParams { alpha: 0.051, mu: 0.236, kappa: 0.128 }));
        assert_eq!(HyperParams::reference(6.0, 36.0), Some(HyperParams { alpha: 0.227, mu: 2.3233, kappa: 0.5 }));
        assert_eq!(HyperParams::reference(3.0, 4.0), None);
        for (_, _, (a, m, k)) in REFERENCE_HYPERPARAMS {
            assert!(HyperParams::new(a, m, k).is_ok());
        }
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::new(0.0, 1.0, 0.1).is_err());
        assert!(HyperParams::new(0.1, -1.0, 0.1).is_err());
        assert!(HyperParams::new(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn rolling_examples() {
        let spec = spec_2_4();
        let settings = SolverSettings::default();
        let fc = |d: Vec<f64>, pv: Vec<f64>| Forecast { demand_kw: d, pv_kw: pv };

        let (p, sol) = rolling_horizon_step(&fc(vec![1.5; 4], vec![0.5; 4]), 2.0, 0.5, &spec, &settings, None).unwrap();
        assert!((p + 1.0).abs() < 1e-6);
        assert!((1.0 + sol.p_b_kw[0]).abs() < 1e-6);

        let (p, _) = rolling_horizon_step(&fc(vec![3.0], vec![0.0]), 2.0, 0.5, &spec, &settings, None).unwrap();
        assert!((p + 2.0).abs() < 1e-6);

        let (p, _) = rolling_horizon_step(&fc(vec![0.0; 6], vec![0.0; 6]), 2.0, 0.5, &spec, &settings, None).unwrap();
        assert!(p.abs() < 1e-6);
    }

    #[test]
    fn rolling_non_convergence_is_error() {
        let settings = SolverSettings { max_iter: 1, ..Default::default() };
        let fc = Forecast { demand_kw: vec![3.0, 0.0, 2.5, 0.1], pv_kw: vec![0.0, 4.0, 0.0, 1.0] };
        let err = rolling_horizon_step(&fc, 2.0, 0.5, &spec_2_4(), &settings, None).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }));
    }
}
