//! Accuracy and statistical-consistency evaluation.
//!
//! Estimates are scored two ways: the outage probability
//! `P(||p_hat - p|| > e_th)` as a function of the threshold, and a two-sided
//! chi-square consistency test on the normalized estimation error squared
//!
//! ```text
//! e = (p_hat - p)^T Sigma_hat^{-1} (p_hat - p)
//! ```
//!
//! which under a Gaussian posterior follows a chi-square distribution with
//! 2 degrees of freedom. The chi2(2) CDF is `1 - exp(-x/2)`, so the
//! acceptance interval for confidence level `1 - alpha` has the closed form
//! `r1 = -2 ln(1 - alpha/2)`, `r2 = -2 ln(alpha/2)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist2, mat2_inverse, mat2_sym_eigvals, Mat2, Vec2};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("estimated covariance is singular or badly conditioned")]
    SingularCovariance,
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    BadAlpha(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One scored estimate: who, when, truth, estimate, and claimed covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub realization: u64,
    pub agent: usize,
    pub step: usize,
    pub true_position: Vec2,
    pub estimated_position: Vec2,
    /// Estimated 2x2 position covariance, symmetric PSD.
    pub position_covariance: Mat2,
}

impl EvalRecord {
    pub fn position_error(&self) -> f64 {
        dist2(self.estimated_position, self.true_position)
    }
}

/// Fraction of records with position error strictly above each threshold.
pub fn outage_probability(
    records: &[EvalRecord],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut errors: Vec<f64> = records.iter().map(|r| r.position_error()).collect();
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&th| {
            let above = errors.partition_point(|e| *e <= th);
            (th, (errors.len() - above) as f64 / n)
        })
        .collect())
}

/// Normalized estimation error squared of one record.
pub fn nees(record: &EvalRecord) -> Result<f64, EvalError> {
    let cov = record.position_covariance;
    let (lo, hi) = mat2_sym_eigvals(&cov);
    if !(lo > 0.0) || hi / lo >= 1e12 {
        return Err(EvalError::SingularCovariance);
    }
    let inv = mat2_inverse(&cov).ok_or(EvalError::SingularCovariance)?;
    let e = [
        record.estimated_position[0] - record.true_position[0],
        record.estimated_position[1] - record.true_position[1],
    ];
    Ok(e[0] * (inv[0][0] * e[0] + inv[0][1] * e[1]) + e[1] * (inv[1][0] * e[0] + inv[1][1] * e[1]))
}

/// Two-sided chi2(2) acceptance interval for confidence level `1 - alpha`.
pub fn chi_square_bounds(alpha: f64) -> Result<(f64, f64), EvalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::BadAlpha(alpha));
    }
    let r1 = -2.0 * (1.0 - alpha / 2.0).ln();
    let r2 = -2.0 * (alpha / 2.0).ln();
    Ok((r1, r2))
}

/// For each confidence level, the fraction of records whose NEES falls in
/// the two-sided acceptance interval. Records whose covariance is singular
/// count as rejected: an estimator reporting a collapsed covariance with
/// nonzero error is maximally overconfident.
pub fn consistency_curve(
    records: &[EvalRecord],
    confidence_levels: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let nees_values: Vec<Option<f64>> = records.iter().map(|r| nees(r).ok()).collect();
    let mut curve = Vec::with_capacity(confidence_levels.len());
    for &level in confidence_levels {
        let alpha = 1.0 - level;
        let (r1, r2) = chi_square_bounds(alpha)?;
        let accepted = nees_values
            .iter()
            .filter(|v| matches!(v, Some(e) if *e >= r1 && *e <= r2))
            .count();
        curve.push((level, accepted as f64 / records.len() as f64));
    }
    Ok(curve)
}

/// Thresholds 0 to 5 m in 0.1 m steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * 0.1).collect()
}

/// Confidence levels 0.05 to 0.95 in 0.05 steps, plus 0.99.
pub fn default_confidence_levels() -> Vec<f64> {
    let mut levels: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    levels.push(0.99);
    levels
}

/// Write records as CSV with one row per record.
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "realization",
            "agent",
            "step",
            "true_x",
            "true_y",
            "est_x",
            "est_y",
            "cov_xx",
            "cov_xy",
            "cov_yy",
        ])?;
        for r in records {
            w.write_record([
                r.realization.to_string(),
                r.agent.to_string(),
                r.step.to_string(),
                r.true_position[0].to_string(),
                r.true_position[1].to_string(),
                r.estimated_position[0].to_string(),
                r.estimated_position[1].to_string(),
                r.position_covariance[0][0].to_string(),
                r.position_covariance[0][1].to_string(),
                r.position_covariance[1][1].to_string(),
            ])?;
        }
        w.flush()?;
    }
    crate::fsio::atomic_write(path, &buf)?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let f = |i: usize| -> f64 { row[i].parse().unwrap_or(f64::NAN) };
        let cov_xy = f(8);
        records.push(EvalRecord {
            realization: row[0].parse().unwrap_or(0),
            agent: row[1].parse().unwrap_or(0),
            step: row[2].parse().unwrap_or(0),
            true_position: [f(3), f(4)],
            estimated_position: [f(5), f(6)],
            position_covariance: [[f(7), cov_xy], [cov_xy, f(9)]],
        });
    }
    Ok(records)
}

/// Read and pool every `*.csv` records file in a directory, sorted by name.
pub fn read_records_dir(dir: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_records_csv(&p)?);
    }
    Ok(records)
}
