//! Battery dispatch laboratory for residential PV self-consumption.
//!
//! Three controllers share one battery model and one closed-loop driver:
//! a greedy rule-based controller, an online projected-gradient controller
//! with action momentum, and a rolling-horizon quadratic program fed by a
//! persistence forecast.

pub mod battery;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod metrics;
pub mod profile;
pub mod qp;
pub mod simulate;
pub mod tuner;

pub use battery::BatterySpec;
pub use controllers::HyperParams;
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use profile::PowerProfile;
pub use simulate::{simulate, DispatchTrace, Policy};
