use serde::{Deserialize, Serialize};

use super::PixelSet;
use crate::error::{Error, Result};
use crate::grid::{check_lead, ConfidenceGrid, LogitGrid, ProbGrid};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
const LOG_T_TOL: f64 = 1e-4;

/// Global temperature for one lead time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScalar {
    pub t: f64,
    pub lead_time: u8,
}

impl TemperatureScalar {
    pub fn new(t: f64, lead_time: u8) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("temperature {t} must be positive")));
        }
        check_lead(lead_time)?;
        Ok(TemperatureScalar { t, lead_time })
    }

    pub fn identity(lead_time: u8) -> Self {
        TemperatureScalar { t: 1.0, lead_time }
    }
}

/// Mean pixel NLL of `softmax(z / t)`.
pub fn temperature_nll(set: &PixelSet, t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in set.logits.iter().zip(&set.labels) {
        let u = [z[0] / t, z[1] / t, z[2] / t];
        let m = u[0].max(u[1]).max(u[2]);
        let lse = m + ((u[0] - m).exp() + (u[1] - m).exp() + (u[2] - m).exp()).ln();
        total += lse - u[y as usize];
    }
    total / set.len() as f64
}

/// Minimizer of a unimodal `f` on `[a, b]` to interval width `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Golden-section search of the NLL over `log T ∈ [ln 0.05, ln 20]`.
pub fn fit_temperature(set: &PixelSet, lead_time: u8) -> Result<TemperatureScalar> {
    check_lead(lead_time)?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for w in set.degeneracy_warnings() {
        log::warn!("temperature fit at lead {lead_time}: {w}");
    }
    let log_t = golden_section(
        |s| temperature_nll(set, s.exp()),
        T_MIN.ln(),
        T_MAX.ln(),
        LOG_T_TOL,
    );
    TemperatureScalar::new(log_t.exp(), lead_time)
}

/// Calibrated probabilities and confidence. `T = 1` reproduces the
/// uncalibrated softmax bit for bit.
pub fn apply_temperature(z: &LogitGrid, t: &TemperatureScalar) -> Result<(ProbGrid, ConfidenceGrid)> {
    if !(t.t > 0.0) || !t.t.is_finite() {
        return Err(Error::InvalidParameter(format!("temperature {} must be positive", t.t)));
    }
    let p = z.softmax_scaled(|_| t.t);
    let c = p.confidence();
    Ok((p, c))
}
