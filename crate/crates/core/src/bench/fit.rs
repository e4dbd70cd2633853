use std::path::Path;

use super::records::{read_records, BenchRecord};
use crate::error::{Error, Result};

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Contract("log-log fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Contract("log-log fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Scaling exponent of `wall_ms` in `n_frames` over the rows of `mode`.
/// Needs at least three distinct frame counts.
pub fn fit_scaling_exponent(records: &[BenchRecord], mode: &str) -> Result<f64> {
    let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.mode == mode).collect();
    let mut distinct: Vec<usize> = rows.iter().map(|r| r.n_frames).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Contract(format!(
            "need rows for at least 3 distinct n_frames in mode `{mode}`, found {}",
            distinct.len()
        )));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n_frames as f64, r.wall_ms)).collect();
    loglog_slope(&pts)
}

pub fn fit_csv(path: &Path, mode: &str) -> Result<f64> {
    fit_scaling_exponent(&read_records(path)?, mode)
}
