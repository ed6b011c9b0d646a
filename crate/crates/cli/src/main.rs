use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dispatch_lab::experiment::{run_compare, run_tune, ExperimentConfig};
use dispatch_lab::profile::{load_profile, save_profile, synth_profile, ColumnMap, SynthParams};

/// Exit status for partial cell failures under `--strict`.
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "dispatch-lab", version, about = "Residential PV + battery dispatch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every controller on every battery size and write traces, metrics and summaries.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Exit with status 2 when any cell failed.
        #[arg(long)]
        strict: bool,
    },
    /// Tune the momentum controller per battery size on the training split.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic demand/PV profile as CSV.
    Synth {
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long, default_value_t = 0.5)]
        dt_hours: f64,
        #[arg(long, default_value_t = 0.6)]
        demand_base_kw: f64,
        #[arg(long, default_value_t = 3.0)]
        pv_peak_kw: f64,
        #[arg(long, default_value_t = 0.2)]
        noise_std_kw: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Check that a profile CSV loads cleanly.
    Validate {
        path: PathBuf,
        #[arg(long, default_value = "timestamp")]
        timestamp_col: String,
        #[arg(long, default_value = "demand_kw")]
        demand_col: String,
        #[arg(long, default_value = "pv_kw")]
        pv_col: String,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg =
            ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Compare { common, strict } => {
            let cfg = common.load()?;
            let outcome = run_compare(&cfg)?;
            for cell in &outcome.cells {
                let status = if cell.is_missing() { "missing" } else { "ok" };
                println!("{:>8} {:<11} {:<8} {:.3}s", cell.size, cell.controller.name(), status, cell.wall_time_s);
            }
            let failed = outcome.failed();
            println!("{} cells, {failed} missing -> {}", outcome.cells.len(), cfg.output_dir.display());
            if strict && failed > 0 {
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Tune { common, budget, seed } => {
            let mut cfg = common.load()?;
            if let Some(b) = budget {
                cfg.tune.budget = b;
            }
            if let Some(s) = seed {
                cfg.tune.seed = s;
            }
            let report = run_tune(&cfg)?;
            for s in &report.sizes {
                let hp = s.result.best;
                println!(
                    "{:>8} alpha={:.4} mu={:.4} kappa={:.4} objective={:.4} ({} candidates)",
                    s.size,
                    hp.alpha,
                    hp.mu,
                    hp.kappa,
                    s.result.objective,
                    s.result.candidates.len()
                );
            }
        }
        Command::Synth { days, dt_hours, demand_base_kw, pv_peak_kw, noise_std_kw, seed, out } => {
            let params = SynthParams { days, dt_hours, demand_base_kw, pv_peak_kw, noise_std_kw, seed };
            let profile = synth_profile(&params)?;
            save_profile(&out, &profile)?;
            println!("wrote {} intervals to {}", profile.len(), out.display());
        }
        Command::Validate { path, timestamp_col, demand_col, pv_col } => {
            let columns = ColumnMap { timestamp: timestamp_col, demand: demand_col, pv: pv_col };
            let p = load_profile(&path, &columns).with_context(|| format!("validating {}", path.display()))?;
            println!("ok: {} intervals of {} h starting at {}", p.len(), p.dt_hours, p.start_epoch);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
