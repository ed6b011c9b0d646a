//! Declarative experiments: controller comparison over a grid of battery
//! sizes, and per-size hyperparameter tuning.
//!
//! Output layout of `compare` (one set per `<size>_<controller>` cell):
//!
//! - `<size>_<controller>_trace.csv`: `t,p_d,p_pv,p_b,p_g,e`
//! - `<size>_<controller>_metrics.json`: [`MetricsReport`] without wall time
//!   (byte-identical across reruns)
//! - `summary.csv`: one row per size, `<controller>_<metric>` columns, empty
//!   cells for failed runs
//! - `summary.json`: every cell with status, metrics and wall time
//! - `plot_data.csv`: long format `size,power_kw,energy_kwh,controller,metric,value`
//! - `timings.csv`: `size,controller,status,wall_time_s`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::BatterySpec;
use crate::controllers::HyperParams;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, regret, MetricsReport};
use crate::profile::{load_profile, resample, synth_profile, ColumnMap, PowerProfile, SynthParams};
use crate::qp::SolverSettings;
use crate::simulate::{save_trace, simulate, Policy, RollingQpConfig, StepSchedule};
use crate::tuner::{tune, TuneResult, TunerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Occam,
    Greedy,
    Mos,
    RollingQp,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Occam => "occam",
            ControllerKind::Greedy => "greedy",
            ControllerKind::Mos => "mos",
            ControllerKind::RollingQp => "rolling_qp",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSource {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub columns: Option<ColumnMap>,
    /// Average to this interval length after loading.
    pub resample_dt_hours: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluateOn {
    /// The whole profile.
    All,
    /// Everything after the training days.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_days: usize,
    pub evaluate: EvaluateOn,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_days: 30, evaluate: EvaluateOn::Test }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosConfig {
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub kappa: Option<f64>,
    /// `tune.json` written by the tune subcommand.
    pub hyperparams_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyConfig {
    pub schedule: StepSchedule,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self { schedule: StepSchedule::InverseSqrt }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub controllers: Vec<ControllerKind>,
    /// `[charge rating kW, capacity kWh]` pairs.
    pub batteries: Vec<(f64, f64)>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_horizon")]
    pub horizon_steps: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub profile: Option<ProfileSource>,
    #[serde(default)]
    pub synth: Option<SynthParams>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub mos: MosConfig,
    #[serde(default)]
    pub greedy: GreedyConfig,
    #[serde(default)]
    pub qp: SolverSettings,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub tune: TunerConfig,
}

fn default_eta() -> f64 {
    1.0
}
fn default_horizon() -> usize {
    48
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// The nine reference sizes: 2, 4 and 6 kW at C-rates 1/2, 1/4 and 1/6.
pub fn reference_sizes() -> Vec<(f64, f64)> {
    [2.0, 4.0, 6.0].iter().flat_map(|&p| [2.0, 4.0, 6.0].map(|h| (p, p * h))).collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative paths in the file are relative to the file.
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            if let Some(src) = cfg.profile.as_mut() {
                if let Some(p) = src.path.as_mut() {
                    rebase(p);
                }
            }
            if let Some(p) = cfg.mos.hyperparams_file.as_mut() {
                rebase(p);
            }
            rebase(&mut cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.controllers.is_empty() {
            return Err(Error::Config("at least one controller is required".into()));
        }
        if self.batteries.is_empty() {
            return Err(Error::Config("at least one battery size is required".into()));
        }
        for &(p, e) in &self.batteries {
            if !(p > 0.0 && e > 0.0 && p.is_finite() && e.is_finite()) {
                return Err(Error::Config(format!("battery size {p} kW / {e} kWh must be positive")));
            }
        }
        if self.horizon_steps == 0 {
            return Err(Error::Config("horizon_steps must be ≥ 1".into()));
        }
        match (&self.profile, &self.synth) {
            (Some(src), None) if src.path.is_some() => {}
            (None, Some(_)) => {}
            _ => return Err(Error::Config("exactly one of [profile] (with path) or [synth] is required".into())),
        }
        for spec in self.battery_specs()? {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn battery_specs(&self) -> Result<Vec<BatterySpec>> {
        self.batteries.iter().map(|&(p, e)| BatterySpec::new(-p, p, 0.0, e, self.eta)).collect()
    }

    pub fn load_profile(&self) -> Result<PowerProfile> {
        let profile = match (&self.profile, &self.synth) {
            (Some(src), _) => {
                let path = src.path.as_ref().ok_or_else(|| Error::Config("[profile] needs a path".into()))?;
                let p = load_profile(path, &src.columns.clone().unwrap_or_default())?;
                match src.resample_dt_hours {
                    Some(dt) => resample(&p, dt)?,
                    None => p,
                }
            }
            (None, Some(params)) => synth_profile(params)?,
            (None, None) => return Err(Error::Config("no profile source".into())),
        };
        Ok(profile)
    }

    /// Profile the comparison is scored on.
    pub fn evaluation_profile(&self, full: &PowerProfile) -> Result<PowerProfile> {
        match self.split {
            Some(SplitConfig { train_days, evaluate: EvaluateOn::Test }) => Ok(full.split_days(train_days)?.1),
            _ => Ok(full.clone()),
        }
    }

    /// Training portion: the first `train_days` days (or the whole profile
    /// when it is shorter).
    pub fn training_profile(&self, full: &PowerProfile) -> Result<PowerProfile> {
        let train_days = self.split.unwrap_or_default().train_days;
        let day = full
            .steps_per_day()
            .ok_or_else(|| Error::Config(format!("dt {} h does not divide a day", full.dt_hours)))?;
        let end = (train_days * day).min(full.len());
        if end == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        full.slice(0, end)
    }

    fn rolling(&self) -> RollingQpConfig {
        RollingQpConfig { horizon_steps: self.horizon_steps, solver: self.qp, warm_start: self.warm_start }
    }

    fn mos_params(&self, spec: &BatterySpec, tuned: &BTreeMap<String, HyperParams>) -> Result<HyperParams> {
        let label = spec.label();
        let explicit = match (self.mos.alpha, self.mos.mu, self.mos.kappa) {
            (Some(a), Some(m), Some(k)) => Some(HyperParams::new(a, m, k)?),
            (None, None, None) => None,
            _ => return Err(Error::Config("[mos] needs all of alpha, mu and kappa".into())),
        };
        explicit
            .or_else(|| tuned.get(&label).copied())
            .or_else(|| HyperParams::reference(spec.p_max_kw, spec.e_max_kwh))
            .ok_or_else(|| Error::Config(format!("no MOS hyperparameters for size {label}")))
    }

    fn policy(
        &self,
        kind: ControllerKind,
        spec: &BatterySpec,
        tuned: &BTreeMap<String, HyperParams>,
    ) -> Result<Policy> {
        Ok(match kind {
            ControllerKind::Occam => Policy::Occam,
            ControllerKind::Greedy => Policy::Greedy(self.greedy.schedule),
            ControllerKind::Mos => Policy::Mos(self.mos_params(spec, tuned)?),
            ControllerKind::RollingQp => Policy::RollingQp(self.rolling()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellStatus {
    Ok { metrics: MetricsReport },
    Missing { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub size: String,
    pub power_kw: f64,
    pub energy_kwh: f64,
    pub controller: ControllerKind,
    pub wall_time_s: f64,
    #[serde(flatten)]
    pub status: CellStatus,
}

impl CellResult {
    pub fn is_missing(&self) -> bool {
        matches!(self.status, CellStatus::Missing { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub cells: Vec<CellResult>,
}

impl CompareOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.is_missing()).count()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Reads the per-size hyperparameters from a `tune.json`.
pub fn read_tuned(path: &Path) -> Result<BTreeMap<String, HyperParams>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: TuneReport = serde_json::from_str(&text)?;
    Ok(report.sizes.into_iter().map(|s| (s.size, s.result.best)).collect())
}

fn run_cell(
    cfg: &ExperimentConfig,
    profile: &PowerProfile,
    spec: &BatterySpec,
    policy: &Policy,
    kind: ControllerKind,
) -> Result<CellResult> {
    let size = spec.label();
    let start = Instant::now();
    let outcome = simulate(profile, spec, policy);
    let wall_time_s = start.elapsed().as_secs_f64();
    let status = match outcome {
        Ok(trace) => {
            let mut metrics = compute_metrics(&trace, spec.e_max_kwh);
            metrics.regret = Some(regret(&trace, profile, spec)?);
            let stem = format!("{size}_{}", kind.name());
            save_trace(cfg.output_dir.join(format!("{stem}_trace.csv")), profile, &trace)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            write_file(&cfg.output_dir.join(format!("{stem}_metrics.json")), json + "\n")?;
            metrics.wall_time_s = Some(wall_time_s);
            CellStatus::Ok { metrics }
        }
        Err(err @ (Error::NotConverged { .. } | Error::SocViolation { .. })) => {
            CellStatus::Missing { reason: err.to_string() }
        }
        Err(other) => return Err(other),
    };
    Ok(CellResult { size, power_kw: spec.p_max_kw, energy_kwh: spec.e_max_kwh, controller: kind, wall_time_s, status })
}

const PLOT_METRICS: [&str; 4] = ["l2_sq", "l1", "cycles", "avg_daily_peak_kw"];

fn metric_values(m: &MetricsReport) -> [f64; 4] {
    [m.l2_sq, m.l1, m.cycles, m.avg_daily_peak_kw]
}

fn write_summaries(cfg: &ExperimentConfig, outcome: &CompareOutcome) -> Result<()> {
    let dir = &cfg.output_dir;

    let mut header = vec!["size".to_string(), "power_kw".into(), "energy_kwh".into()];
    for kind in &cfg.controllers {
        for m in PLOT_METRICS.iter().chain(["regret"].iter()) {
            header.push(format!("{}_{m}", kind.name()));
        }
    }
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record(&header)?;
    for (p, e) in &cfg.batteries {
        let label = format!("{p}-{e}");
        let mut row = vec![label.clone(), p.to_string(), e.to_string()];
        for kind in &cfg.controllers {
            let cell = outcome.cells.iter().find(|c| c.size == label && c.controller == *kind);
            match cell.map(|c| &c.status) {
                Some(CellStatus::Ok { metrics }) => {
                    row.extend(metric_values(metrics).iter().map(|v| v.to_string()));
                    row.push(metrics.regret.map(|r| r.to_string()).unwrap_or_default());
                }
                _ => row.extend(std::iter::repeat_n(String::new(), PLOT_METRICS.len() + 1)),
            }
        }
        summary.write_record(&row)?;
    }
    summary.flush().map_err(|e| Error::io(dir.join("summary.csv"), e))?;

    let mut plot = csv::Writer::from_path(dir.join("plot_data.csv"))?;
    plot.write_record(["size", "power_kw", "energy_kwh", "controller", "metric", "value"])?;
    let mut timings = csv::Writer::from_path(dir.join("timings.csv"))?;
    timings.write_record(["size", "controller", "status", "wall_time_s"])?;
    for cell in &outcome.cells {
        let status = if cell.is_missing() { "missing" } else { "ok" };
        timings.write_record([&cell.size, cell.controller.name(), status, &cell.wall_time_s.to_string()])?;
        if let CellStatus::Ok { metrics } = &cell.status {
            for (name, value) in PLOT_METRICS.iter().zip(metric_values(metrics)) {
                plot.write_record([
                    cell.size.clone(),
                    cell.power_kw.to_string(),
                    cell.energy_kwh.to_string(),
                    cell.controller.name().to_string(),
                    name.to_string(),
                    value.to_string(),
                ])?;
            }
        }
    }
    plot.flush().map_err(|e| Error::io(dir.join("plot_data.csv"), e))?;
    timings.flush().map_err(|e| Error::io(dir.join("timings.csv"), e))?;

    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(outcome)? + "\n")
}

/// Runs every (size × controller) cell. Solver failures mark the cell
/// missing and the run continues; configuration and I/O problems abort.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    cfg.validate()?;
    let full = cfg.load_profile()?;
    let profile = cfg.evaluation_profile(&full)?;
    let tuned = match &cfg.mos.hyperparams_file {
        Some(path) => read_tuned(path)?,
        None => BTreeMap::new(),
    };
    create_dir(&cfg.output_dir)?;

    let mut jobs = Vec::new();
    for spec in cfg.battery_specs()? {
        for &kind in &cfg.controllers {
            jobs.push((spec, kind, cfg.policy(kind, &spec, &tuned)?));
        }
    }
    let pool = thread_pool(cfg.workers)?;
    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|(spec, kind, policy)| run_cell(cfg, &profile, spec, policy, *kind))
            .collect::<Result<Vec<_>>>()
    })?;
    let outcome = CompareOutcome { cells };
    write_summaries(cfg, &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTuning {
    pub size: String,
    pub power_kw: f64,
    pub energy_kwh: f64,
    pub result: TuneResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub train_intervals: usize,
    pub sizes: Vec<SizeTuning>,
}

/// Tunes the momentum controller per battery size on the training split
/// and writes `tune.json` (consumable through `[mos] hyperparams_file`).
pub fn run_tune(cfg: &ExperimentConfig) -> Result<TuneReport> {
    cfg.validate()?;
    let full = cfg.load_profile()?;
    let train = cfg.training_profile(&full)?;
    create_dir(&cfg.output_dir)?;
    let pool = thread_pool(cfg.workers)?;
    let sizes = pool.install(|| {
        cfg.battery_specs()?
            .iter()
            .map(|spec| {
                Ok(SizeTuning {
                    size: spec.label(),
                    power_kw: spec.p_max_kw,
                    energy_kwh: spec.e_max_kwh,
                    result: tune(&train, spec, &cfg.tune)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = TuneReport { train_intervals: train.len(), sizes };
    write_file(&cfg.output_dir.join("tune.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
controllers = ["occam", "mos"]
batteries = [[2.0, 4.0]]

[synth]
days = 2
dt_hours = 0.5
demand_base_kw = 0.6
pv_peak_kw = 3.0
noise_std_kw = 0.2
seed = 1
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.controllers, vec![ControllerKind::Occam, ControllerKind::Mos]);
        assert_eq!(cfg.horizon_steps, 48);
        assert_eq!(cfg.tune.gamma, 0.02);
        assert_eq!(cfg.qp.max_iter, 50_000);
    }

    #[test]
    fn rejects_invalid_configs() {
        let no_ctrl = MINIMAL.replace(r#"["occam", "mos"]"#, "[]");
        assert!(ExperimentConfig::from_toml_str(&no_ctrl).is_err());
        let bad_size = MINIMAL.replace("[[2.0, 4.0]]", "[[0.0, 4.0]]");
        assert!(ExperimentConfig::from_toml_str(&bad_size).is_err());
        let unknown = MINIMAL.replace("occam", "lqr");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
        let no_source = MINIMAL.split("[synth]").next().unwrap().to_string();
        assert!(ExperimentConfig::from_toml_str(&no_source).is_err());
    }

    #[test]
    fn reference_grid_has_nine_sizes() {
        let sizes = reference_sizes();
        assert_eq!(sizes.len(), 9);
        assert_eq!(sizes[0], (2.0, 4.0));
        assert_eq!(sizes[8], (6.0, 36.0));
        for (p, e) in sizes {
            assert!(HyperParams::reference(p, e).is_some());
        }
    }

    #[test]
    fn mos_parameter_precedence() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let spec = BatterySpec::symmetric(2.0, 4.0).unwrap();
        let mut tuned = BTreeMap::new();
        assert_eq!(cfg.mos_params(&spec, &tuned).unwrap(), HyperParams::reference(2.0, 4.0).unwrap());
        tuned.insert("2-4".to_string(), HyperParams { alpha: 0.3, mu: 0.3, kappa: 0.3 });
        assert_eq!(cfg.mos_params(&spec, &tuned).unwrap().alpha, 0.3);
        cfg.mos = MosConfig { alpha: Some(0.9), mu: Some(0.0), kappa: Some(0.0), hyperparams_file: None };
        assert_eq!(cfg.mos_params(&spec, &tuned).unwrap().alpha, 0.9);
        let odd = BatterySpec::symmetric(3.0, 5.0).unwrap();
        cfg.mos = MosConfig::default();
        assert!(cfg.mos_params(&odd, &BTreeMap::new()).is_err());
    }
}
