//! Synthetic generators, Monte Carlo failure estimates, stability curves,
//! stress suites, diagnostics and constant calibration.

mod calibrate;
mod generator;
mod stress;

pub use calibrate::*;
pub use generator::*;
pub use stress::*;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knee::PerformanceCurve;
use crate::ridge::{ridge_weights, sign_accuracy, RidgeProxyConfig};
use crate::seed::{derive_seed, rng_for};
use crate::spectral::{eigenvalues, floor_holds, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEstimate {
    pub p_hat: f64,
    pub ci_half_width: f64,
    pub failures: usize,
    pub trials: usize,
}

impl FailureEstimate {
    pub fn from_counts(failures: usize, trials: usize) -> Self {
        let p = failures as f64 / trials as f64;
        Self { p_hat: p, ci_half_width: 1.96 * (p * (1.0 - p) / trials as f64).sqrt(), failures, trials }
    }
}

/// Fraction of `trials` independent K-row samples with `lambda_min(Sigma_hat_K) < delta`.
pub fn estimate_failure_prob(
    config: &GeneratorConfig,
    k: u64,
    delta: f64,
    trials: usize,
) -> Result<FailureEstimate> {
    if trials < 100 {
        return Err(Error::invalid(format!("trials = {trials}; at least 100 are required")));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let root = PopulationRoot::new(&config.sigma)?;
    let fails: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let s = sample_scatter(config, &root, k, "failure-trial", i as u64)?;
            Ok(!floor_holds(&(s / k as f64), delta))
        })
        .collect::<Result<_>>()?;
    Ok(FailureEstimate::from_counts(fails.iter().filter(|f| **f).count(), trials))
}

/// Score recorded at each grid point of a stability curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveMetric {
    /// `lambda_min(Sigma_hat_K)`.
    LambdaMin,
    /// Indicator of `lambda_min(Sigma_hat_K) >= floor`; its mean over
    /// replicates is the success frequency at K.
    FloorCoverage { floor: f64 },
    /// Sign accuracy of ridge on a planted linear task, scored on
    /// `test_size` fresh rows.
    RidgeAccuracy { ridge: RidgeProxyConfig, test_size: usize },
}

/// One curve point per grid K; each replicate is a single growing prompt, so
/// the K-th point of a replicate uses its first K rows.
pub fn stability_curve(
    config: &GeneratorConfig,
    k_grid: &[u64],
    metric: &CurveMetric,
    replicates: usize,
) -> Result<PerformanceCurve> {
    if k_grid.is_empty() {
        return Err(Error::Empty("k grid is empty".into()));
    }
    if k_grid[0] == 0 || k_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("k grid must be positive and strictly increasing"));
    }
    if replicates == 0 {
        return Err(Error::invalid("replicates must be at least 1"));
    }
    let d = config.dim();
    if let CurveMetric::RidgeAccuracy { ridge, test_size } = metric {
        ridge.validate()?;
        if ridge.planted_weights.len() != d {
            return Err(Error::invalid("planted weights must have one entry per feature"));
        }
        if *test_size == 0 {
            return Err(Error::invalid("test_size must be positive"));
        }
    }

    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut stream = FeatureStream::new(&config.with_seed(derive_seed(config.seed, "replicate", r as u64)))?;
            let mut noise_rng = rng_for(config.seed, "replicate-noise", r as u64);
            let ridge_setup = match metric {
                CurveMetric::RidgeAccuracy { ridge, test_size } => {
                    let test_cfg = config.with_seed(derive_seed(config.seed, "replicate-test", r as u64));
                    let test = generate(&test_cfg, *test_size)?;
                    Some((ridge, DVector::from_column_slice(&ridge.planted_weights), test))
                }
                _ => None,
            };
            let mut gram = DMatrix::<f64>::zeros(d, d);
            let mut xty = DVector::<f64>::zeros(d);
            let mut have = 0u64;
            let mut out = Vec::with_capacity(k_grid.len());
            for &k in k_grid {
                let h = stream.draw((k - have) as usize)?;
                let h = h.data();
                gram += h.tr_mul(h);
                if let Some((ridge, w, _)) = &ridge_setup {
                    let noise = DVector::<f64>::from_fn(h.nrows(), |_, _| StandardNormal.sample(&mut noise_rng));
                    let y = h * w + noise * ridge.noise_sigma;
                    xty += h.tr_mul(&y);
                }
                have = k;
                let cov = &gram / k as f64;
                let score = match metric {
                    CurveMetric::LambdaMin => eigenvalues(&cov)?.last().copied().unwrap_or(0.0).max(0.0),
                    CurveMetric::FloorCoverage { floor } => {
                        if floor_holds(&cov, *floor) { 1.0 } else { 0.0 }
                    }
                    CurveMetric::RidgeAccuracy { .. } => {
                        let (ridge, w, test) = ridge_setup.as_ref().expect("ridge setup");
                        let w_hat = ridge_weights(&gram, &xty, ridge.lambda_reg)?;
                        sign_accuracy(&w_hat, w, test.data())
                    }
                };
                out.push(score);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let reps: Vec<Vec<f64>> = (0..k_grid.len()).map(|i| per_rep.iter().map(|r| r[i]).collect()).collect();
    PerformanceCurve::from_replicates(k_grid, reps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kurtosis_per_coordinate_mean: f64,
    pub drift_stat: Vec<f64>,
}

/// Mean coordinate kurtosis and the relative operator-norm distance of each
/// window's covariance from the first window's.
pub fn diagnostics(features: &FeatureMatrix, window: usize) -> Result<Diagnostics> {
    let k = features.k();
    if window == 0 || k < 2 * window {
        return Err(Error::InsufficientData(format!(
            "diagnostics need K >= 2 * window (K = {k}, window = {window})"
        )));
    }
    let h = features.data();
    let mut kurt_sum = 0.0;
    for col in h.column_iter() {
        let mean = col.mean();
        let (m2, m4) = col.iter().fold((0.0, 0.0), |(a, b), v| {
            let z = (v - mean) * (v - mean);
            (a + z, b + z * z)
        });
        let (m2, m4) = (m2 / k as f64, m4 / k as f64);
        kurt_sum += if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
    }
    let windows = k / window;
    let cov_of = |w: usize| {
        let block = h.rows(w * window, window);
        block.tr_mul(&block) / window as f64
    };
    let first = cov_of(0);
    let base = opnorm_sym(&first)?;
    if base <= 0.0 {
        return Err(Error::Degenerate("first window covariance is zero".into()));
    }
    let drift_stat = (0..windows)
        .map(|w| Ok(opnorm_sym(&(cov_of(w) - &first))? / base))
        .collect::<Result<_>>()?;
    Ok(Diagnostics { kurtosis_per_coordinate_mean: kurt_sum / features.d() as f64, drift_stat })
}

/// Operator norm of a symmetric matrix (largest absolute eigenvalue).
pub fn opnorm_sym(m: &DMatrix<f64>) -> Result<f64> {
    let m = (m + m.transpose()) * 0.5;
    let e = eigenvalues(&m)?;
    Ok(e[0].abs().max(e[e.len() - 1].abs()))
}
