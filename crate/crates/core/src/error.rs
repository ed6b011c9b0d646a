use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("row {row}: timestamp spacing {found_s} s differs from {expected_s} s")]
    NonUniformSpacing { row: usize, expected_s: i64, found_s: i64 },

    #[error("row {row}: invalid {column} value {value}")]
    InvalidValue { row: usize, column: String, value: f64 },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("resample: {0}")]
    Resample(String),

    #[error("invalid battery spec: {0}")]
    InvalidBattery(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("insufficient history: need {needed} values, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("SoC {e_kwh} kWh outside [{e_min}, {e_max}] at step {step}")]
    SocViolation { step: usize, e_kwh: f64, e_min: f64, e_max: f64 },

    #[error("horizon solver did not converge at step {step} after {iterations} iterations")]
    NotConverged { step: usize, iterations: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid tuner config: {0}")]
    InvalidTuner(String),

    #[error("all tuning candidates failed")]
    TuningFailed,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
