//! Hyperparameter search for the momentum controller.
//!
//! Each candidate `(alpha, mu, kappa)` is scored by running the controller on
//! the training profile and evaluating `l2_sq + gamma * l1` of the grid power.
//! Candidates come either from a full grid or from a seeded, randomly shifted
//! Halton sequence; the sequence is nested, so a larger budget always
//! evaluates a superset of a smaller one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::BatterySpec;
use crate::controllers::HyperParams;
use crate::error::{Error, Result};
use crate::metrics::compute_metrics;
use crate::profile::PowerProfile;
use crate::simulate::{simulate, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SearchMode {
    /// `budget` points of a seeded low-discrepancy sequence.
    QuasiRandom,
    /// Every combination of `points_per_axis` evenly spaced values per axis
    /// (endpoints included). The budget is not used.
    Grid { points_per_axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub alpha_range: (f64, f64),
    pub mu_range: (f64, f64),
    pub kappa_range: (f64, f64),
    pub gamma: f64,
    pub budget: usize,
    pub seed: u64,
    pub mode: SearchMode,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            alpha_range: (0.01, 1.0),
            mu_range: (0.0, 5.0),
            kappa_range: (0.0, 0.75),
            gamma: 0.02,
            budget: 64,
            seed: 0,
            mode: SearchMode::QuasiRandom,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [("alpha", self.alpha_range), ("mu", self.mu_range), ("kappa", self.kappa_range)];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidTuner(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.alpha_range.0 <= 0.0 || self.mu_range.0 < 0.0 || self.kappa_range.0 < 0.0 || self.kappa_range.1 >= 1.0 {
            return Err(Error::InvalidTuner("ranges leave the admissible hyperparameter box".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidTuner(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        match self.mode {
            SearchMode::QuasiRandom if self.budget == 0 => Err(Error::InvalidTuner("budget must be ≥ 1".into())),
            SearchMode::Grid { points_per_axis: 0 } => Err(Error::InvalidTuner("grid needs ≥ 1 point per axis".into())),
            _ => Ok(()),
        }
    }

    /// Candidate list in evaluation order.
    pub fn candidates(&self) -> Vec<HyperParams> {
        let scale = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        match self.mode {
            SearchMode::Grid { points_per_axis: k } => {
                let axis = |r: (f64, f64)| -> Vec<f64> {
                    if k == 1 {
                        vec![r.0]
                    } else {
                        (0..k).map(|i| r.0 + (r.1 - r.0) * i as f64 / (k - 1) as f64).collect()
                    }
                };
                let (alphas, mus, kappas) = (axis(self.alpha_range), axis(self.mu_range), axis(self.kappa_range));
                let mut out = Vec::with_capacity(k * k * k);
                for &alpha in &alphas {
                    for &mu in &mus {
                        for &kappa in &kappas {
                            out.push(HyperParams { alpha, mu, kappa });
                        }
                    }
                }
                out
            }
            SearchMode::QuasiRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let shift: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
                (0..self.budget)
                    .map(|i| {
                        let u = |d: usize| (radical_inverse(i as u64 + 1, [2, 3, 5][d]) + shift[d]).fract();
                        HyperParams {
                            alpha: scale(self.alpha_range, u(0)),
                            mu: scale(self.mu_range, u(1)),
                            kappa: scale(self.kappa_range, u(2)),
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Van der Corput radical inverse of `i` in `base`.
fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut r) = (inv, 0.0);
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub params: HyperParams,
    /// `None` when the run failed.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: HyperParams,
    pub objective: f64,
    pub gamma: f64,
    pub seed: u64,
    pub mode: SearchMode,
    pub candidates: Vec<Evaluation>,
}

/// `l2_sq + gamma * l1` of the momentum controller's grid power.
pub fn training_objective(profile: &PowerProfile, spec: &BatterySpec, hp: &HyperParams, gamma: f64) -> Result<f64> {
    let trace = simulate(profile, spec, &Policy::Mos(*hp))?;
    let m = compute_metrics(&trace, spec.e_max_kwh);
    Ok(m.l2_sq + gamma * m.l1)
}

fn lex_cmp(a: &HyperParams, b: &HyperParams) -> std::cmp::Ordering {
    a.alpha.total_cmp(&b.alpha).then(a.mu.total_cmp(&b.mu)).then(a.kappa.total_cmp(&b.kappa))
}

pub fn tune(train: &PowerProfile, spec: &BatterySpec, cfg: &TunerConfig) -> Result<TuneResult> {
    cfg.validate()?;
    train.validate()?;
    let day = (24.0 / train.dt_hours).round() as usize;
    if train.len() < 2 * day {
        return Err(Error::InvalidTuner(format!(
            "training profile has {} intervals, needs at least two days ({})",
            train.len(),
            2 * day
        )));
    }
    let candidates: Vec<Evaluation> = cfg
        .candidates()
        .into_par_iter()
        .map(|params| Evaluation { params, objective: training_objective(train, spec, &params, cfg.gamma).ok() })
        .collect();
    let (best, objective) = candidates
        .iter()
        .filter_map(|c| c.objective.map(|o| (c.params, o)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)))
        .ok_or(Error::TuningFailed)?;
    Ok(TuneResult { best, objective, gamma: cfg.gamma, seed: cfg.seed, mode: cfg.mode, candidates })
}
