//! Log-log least squares.

use serde::{Deserialize, Serialize};

use crate::error::{EsrfError, Result};

pub const MIN_FIT_ROWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Rows dropped for a non-positive (or non-finite) error.
    pub excluded: usize,
}

/// OLS of `log error` on `log h`. Rows with `error <= 0` are skipped and
/// counted in `excluded`.
pub fn fit_rate(table: &[(f64, f64)]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = table
        .iter()
        .filter(|(h, e)| *h > 0.0 && *e > 0.0 && e.is_finite() && h.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let excluded = table.len() - pts.len();
    if pts.len() < MIN_FIT_ROWS {
        return Err(EsrfError::FitUnavailable(format!(
            "{} usable rows ({excluded} excluded), need {MIN_FIT_ROWS}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(EsrfError::FitUnavailable("all h values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        excluded,
    })
}
