//! Persistence forecasting: the next `horizon` intervals repeat the last
//! `horizon` observed ones.

use crate::error::{Error, Result};
use crate::profile::PowerProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub demand_kw: Vec<f64>,
    pub pv_kw: Vec<f64>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.demand_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand_kw.is_empty()
    }

    pub fn net_base(&self) -> Vec<f64> {
        self.demand_kw.iter().zip(&self.pv_kw).map(|(d, pv)| d - pv).collect()
    }
}

/// Forecast for the `horizon` intervals following the end of the history
/// slices: entry `k` is the observation `horizon` intervals before it.
pub fn persistence(demand_kw: &[f64], pv_kw: &[f64], horizon: usize) -> Result<Forecast> {
    let available = demand_kw.len().min(pv_kw.len());
    if horizon == 0 || available < horizon {
        return Err(Error::InsufficientHistory { needed: horizon.max(1), available });
    }
    Ok(Forecast {
        demand_kw: demand_kw[demand_kw.len() - horizon..].to_vec(),
        pv_kw: pv_kw[pv_kw.len() - horizon..].to_vec(),
    })
}

pub fn persistence_forecast(history: &PowerProfile, horizon: usize) -> Result<Forecast> {
    persistence(&history.demand_kw, &history.pv_kw, horizon)
}
