//! Evaluation metrics (R²/NSE, RMSE, MAE, sMAPE, IoA), the composite
//! pollution index, and the spatiotemporal analyses: diurnal bins, monthly
//! means, meteorological-regime stratification, correlations, and residual
//! diagnostics.

use chrono::{DateTime, Datelike, Timelike, Utc};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::quantile_sorted;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

fn check(y: &[f64], yhat: &[f64]) -> Result<(), MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Coefficient of determination: 1 - SS_res/SS_tot. Undefined when the
/// observations are constant.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat)?;
    let ybar = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::Degenerate(
            "observations have zero variance".into(),
        ));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Nash-Sutcliffe efficiency; the formula coincides with R² exactly.
pub fn nse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    r2(y, yhat)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat)?;
    let ms: f64 =
        y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    Ok(ms.sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Symmetric mean absolute percentage error in percent. Terms where both
/// values are zero contribute nothing (perfect agreement).
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat)?;
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let denom = (a.abs() + b.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (a - b).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * total / y.len() as f64)
}

/// Willmott's index of agreement, in [0, 1].
pub fn ioa(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat)?;
    let ybar = mean(y);
    let num: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| ((b - ybar).abs() + (a - ybar).abs()).powi(2))
        .sum();
    if den == 0.0 {
        // Perfect constant agreement: num is also zero.
        return Ok(1.0);
    }
    // The triangle inequality bounds num by den, so the true value lies in
    // [0, 1]; clamping only absorbs rounding at the lower edge.
    Ok((1.0 - num / den).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeciesMetrics {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub smape_pct: f64,
    pub ioa: f64,
    pub nse: f64,
}

impl SpeciesMetrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self, MetricsError> {
        Ok(SpeciesMetrics {
            r2: r2(y, yhat)?,
            rmse: rmse(y, yhat)?,
            mae: mae(y, yhat)?,
            smape_pct: smape(y, yhat)?,
            ioa: ioa(y, yhat)?,
            nse: nse(y, yhat)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// (species name, metrics) pairs in input order.
    pub per_species: Vec<(String, SpeciesMetrics)>,
    /// Unweighted mean of each metric across species.
    pub average: SpeciesMetrics,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Pooled per-species metrics; every species slice must have the same
    /// number of samples.
    pub fn compute(
        species: &[(&str, &[f64], &[f64])],
    ) -> Result<MetricsReport, MetricsError> {
        if species.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = species[0].1.len();
        let mut per_species = Vec::new();
        for (name, y, yhat) in species {
            if y.len() != n {
                return Err(MetricsError::LengthMismatch(y.len(), n));
            }
            per_species.push((name.to_string(), SpeciesMetrics::compute(y, yhat)?));
        }
        let k = per_species.len() as f64;
        let avg = |f: fn(&SpeciesMetrics) -> f64| {
            per_species.iter().map(|(_, m)| f(m)).sum::<f64>() / k
        };
        let average = SpeciesMetrics {
            r2: avg(|m| m.r2),
            rmse: avg(|m| m.rmse),
            mae: avg(|m| m.mae),
            smape_pct: avg(|m| m.smape_pct),
            ioa: avg(|m| m.ioa),
            nse: avg(|m| m.nse),
        };
        Ok(MetricsReport {
            per_species,
            average,
            n_samples: n,
        })
    }
}

/// Composite pollution index: sum of species values normalized by their
/// training-split maxima.
pub fn composite_pollution(
    co: f64,
    no: f64,
    so2: f64,
    maxima: [f64; 3],
) -> Result<f64, MetricsError> {
    if maxima.iter().any(|&m| m <= 0.0) {
        return Err(MetricsError::Degenerate(
            "composite index maxima must be strictly positive".into(),
        ));
    }
    Ok(co / maxima[0] + no / maxima[1] + so2 / maxima[2])
}

/// Mean per 3-hour bin of the UTC day: [00-03), [03-06), ..., [21-24).
/// Empty bins are reported absent.
pub fn diurnal_profile(
    values: &[f64],
    timestamps: &[DateTime<Utc>],
) -> Result<Vec<Option<f64>>, MetricsError> {
    if values.len() != timestamps.len() {
        return Err(MetricsError::LengthMismatch(values.len(), timestamps.len()));
    }
    let mut sums = [0.0; 8];
    let mut counts = [0usize; 8];
    for (&v, t) in values.iter().zip(timestamps) {
        let bin = (t.hour() / 3) as usize;
        sums[bin] += v;
        counts[bin] += 1;
    }
    Ok((0..8)
        .map(|b| (counts[b] > 0).then(|| sums[b] / counts[b] as f64))
        .collect())
}

/// Mean per calendar month (January first). Missing months are absent, not
/// zero.
pub fn monthly_means(
    values: &[f64],
    timestamps: &[DateTime<Utc>],
) -> Result<Vec<Option<f64>>, MetricsError> {
    if values.len() != timestamps.len() {
        return Err(MetricsError::LengthMismatch(values.len(), timestamps.len()));
    }
    let mut sums = [0.0; 12];
    let mut counts = [0usize; 12];
    for (&v, t) in values.iter().zip(timestamps) {
        let m = t.month0() as usize;
        sums[m] += v;
        counts[m] += 1;
    }
    Ok((0..12)
        .map(|m| (counts[m] > 0).then(|| sums[m] / counts[m] as f64))
        .collect())
}

/// Mean pollution per (temperature quartile x wind quartile) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeTable {
    /// Interior quartile boundaries (Q1, Q2, Q3) of temperature.
    pub temp_bounds: [f64; 3],
    pub wind_bounds: [f64; 3],
    /// `mean[ti][wi]`, temperature quartile major; empty cells absent.
    pub mean: [[Option<f64>; 4]; 4],
    pub count: [[usize; 4]; 4],
    pub n: usize,
}

fn quartile_of(x: f64, bounds: &[f64; 3]) -> usize {
    bounds.iter().filter(|&&b| x > b).count()
}

pub fn regime_stratify(
    pollutant: &[f64],
    temperature: &[f64],
    wind: &[f64],
) -> Result<RegimeTable, MetricsError> {
    if pollutant.len() != temperature.len() || pollutant.len() != wind.len() {
        return Err(MetricsError::LengthMismatch(
            pollutant.len(),
            temperature.len().max(wind.len()),
        ));
    }
    if pollutant.len() < 4 {
        return Err(MetricsError::Degenerate(
            "need at least 4 samples for quartile stratification".into(),
        ));
    }
    let bounds = |v: &[f64]| -> [f64; 3] {
        let mut sorted = v.to_vec();
        sorted.sort_by(f64::total_cmp);
        [
            quantile_sorted(&sorted, 0.25),
            quantile_sorted(&sorted, 0.5),
            quantile_sorted(&sorted, 0.75),
        ]
    };
    let temp_bounds = bounds(temperature);
    let wind_bounds = bounds(wind);
    let mut sums = [[0.0; 4]; 4];
    let mut count = [[0usize; 4]; 4];
    for i in 0..pollutant.len() {
        let ti = quartile_of(temperature[i], &temp_bounds);
        let wi = quartile_of(wind[i], &wind_bounds);
        sums[ti][wi] += pollutant[i];
        count[ti][wi] += 1;
    }
    let mut mean_cells = [[None; 4]; 4];
    for ti in 0..4 {
        for wi in 0..4 {
            if count[ti][wi] > 0 {
                mean_cells[ti][wi] = Some(sums[ti][wi] / count[ti][wi] as f64);
            }
        }
    }
    Ok(RegimeTable {
        temp_bounds,
        wind_bounds,
        mean: mean_cells,
        count,
        n: pollutant.len(),
    })
}

pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricsError::Degenerate(
            "correlation undefined for constant input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// One row per sample, sorted by residual, pairing each empirical residual
/// with the theoretical normal quantile of its rank (plot-ready QQ and
/// scale-location tables).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub fitted: f64,
    pub residual: f64,
    pub sqrt_abs_residual: f64,
    pub theoretical_quantile: f64,
}

pub fn residual_diagnostics(
    y: &[f64],
    yhat: &[f64],
) -> Result<Vec<ResidualRow>, MetricsError> {
    check(y, yhat)?;
    let mut pairs: Vec<(f64, f64)> = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| (a - b, *b))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let n = pairs.len();
    let residual_std = {
        let m = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
        (pairs.iter().map(|p| (p.0 - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    // Degenerate (all-equal) residuals map to zero theoretical quantiles.
    let normal = Normal::new(0.0, residual_std.max(f64::MIN_POSITIVE)).unwrap();
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(i, (residual, fitted))| {
            let p = (i as f64 + 0.5) / n as f64;
            ResidualRow {
                fitted,
                residual,
                sqrt_abs_residual: residual.abs().sqrt(),
                theoretical_quantile: if residual_std > 0.0 {
                    normal.inverse_cdf(p)
                } else {
                    0.0
                },
            }
        })
        .collect())
}
