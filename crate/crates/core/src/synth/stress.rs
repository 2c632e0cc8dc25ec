use serde::{Deserialize, Serialize};

use super::{stability_curve, CurveMetric, DriftMode, GeneratorConfig, GeneratorKind};
use crate::bounds::{dependence_inflation, k_simplified, BoundConstants, TargetSpec};
use crate::error::{Error, Result};
use crate::knee::{bootstrap_knee, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use crate::seed::derive_seed;
use crate::spectral::{spectral_summary, CovarianceMatrix, DEFAULT_Q, DEFAULT_RANK_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressAxis {
    /// Strength is the drift magnitude epsilon (radial shrink).
    Drift,
    /// Strength is 1/nu for Student-t rows; 0 is Gaussian.
    Tails,
    /// Strength is the AR(1) coefficient rho.
    Dependence,
}

impl StressAxis {
    pub fn default_strengths(self) -> Vec<f64> {
        match self {
            StressAxis::Drift => vec![0.0, 0.01, 0.05, 0.10],
            StressAxis::Tails => vec![0.0, 0.1, 0.2, 1.0 / 3.0],
            StressAxis::Dependence => vec![0.0, 0.2, 0.5, 0.8],
        }
    }

    /// Natural parameter for a strength: epsilon, nu, or rho.
    pub fn parameter(self, strength: f64) -> f64 {
        match self {
            StressAxis::Tails if strength == 0.0 => f64::INFINITY,
            StressAxis::Tails => 1.0 / strength,
            _ => strength,
        }
    }

    pub fn violated_kind(self, strength: f64) -> Result<GeneratorKind> {
        let kind = match self {
            StressAxis::Drift => GeneratorKind::Drifted { epsilon: strength, mode: DriftMode::Radial, ramp: None },
            StressAxis::Tails => {
                if !(0.0..0.5).contains(&strength) {
                    return Err(Error::Domain(format!("tail strength 1/nu = {strength} must lie in [0, 0.5)")));
                }
                GeneratorKind::StudentT { nu: self.parameter(strength) }
            }
            StressAxis::Dependence => GeneratorKind::Ar1 { rho: strength },
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressOptions {
    pub grid: Vec<u64>,
    pub replicates: usize,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Defaults to floor coverage at `spec.delta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<CurveMetric>,
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

/// Geometric grid from `lo` to at least `hi`, rounded and deduplicated.
pub fn geometric_grid(lo: u64, hi: u64, ratio: f64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut x = lo as f64;
    loop {
        let k = x.round() as u64;
        if out.last() != Some(&k) {
            out.push(k);
        }
        if k >= hi {
            break;
        }
        x *= ratio;
    }
    out
}

/// A ready-to-run stress setup: population, target and curve options.
#[derive(Debug, Clone, PartialEq)]
pub struct StressSetup {
    pub sigma: CovarianceMatrix,
    pub spec: TargetSpec,
    pub options: StressOptions,
}

/// Default setups: d = 50 for drift, 200 for tails, 100 for dependence.
pub fn default_stress_setup(axis: StressAxis) -> StressSetup {
    let (d, scale, ratio, grid) = match axis {
        // small feature scale so that eps in [0, 0.1] is a real perturbation
        StressAxis::Drift => (50, 0.0125, 0.5, (1..=50).map(|i| 50 * i).collect()),
        StressAxis::Tails => (200, 1.0, 0.25, geometric_grid(200, 3200, 1.06)),
        StressAxis::Dependence => (100, 1.0, 0.25, geometric_grid(100, 4000, 1.08)),
    };
    let sigma = CovarianceMatrix::identity(d).scaled(scale).expect("finite");
    StressSetup {
        sigma,
        spec: TargetSpec { delta: ratio * scale, xi: 0.1, sigma: 1.0 },
        options: StressOptions {
            grid,
            replicates: 20,
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            metric: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub strength: f64,
    /// epsilon, nu or rho.
    pub parameter: f64,
    pub k_nominal: u64,
    pub k_emp: u64,
    pub k_emp_ci: (u64, u64),
    pub delta_k: i64,
    /// `k_emp / k_nominal`.
    pub inflation: f64,
    /// `1 + c_rho` on the dependence axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_inflation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendStats {
    /// Least-squares fit of delta_k against strength.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub nondecreasing: bool,
    /// Worst `max(obs/pred, pred/obs)` of the inflation on the dependence axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inflation_mismatch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub axis: StressAxis,
    pub rows: Vec<StressRow>,
    pub trend_stats: TrendStats,
}

/// Simple linear regression of y on x: (slope, intercept, r^2).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    // a flat response is fitted exactly by a flat line
    let r2 = if syy > 0.0 && sxx > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

pub fn run_stress_suite(
    axis: StressAxis,
    strengths: &[f64],
    base_config: &GeneratorConfig,
    spec: &TargetSpec,
    constants: &BoundConstants,
    options: &StressOptions,
) -> Result<StressReport> {
    if strengths.is_empty() {
        return Err(Error::Empty("no stress strengths given".into()));
    }
    if strengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("strengths must be sorted ascending without repeats"));
    }
    if base_config.kind != GeneratorKind::Gaussian {
        return Err(Error::invalid("stress suites start from a Gaussian base generator"));
    }
    spec.validate()?;
    constants.validate()?;
    let metric = options.metric.clone().unwrap_or(CurveMetric::FloorCoverage { floor: spec.delta });
    let summary = spectral_summary(&base_config.sigma, DEFAULT_Q, DEFAULT_RANK_TOL)?;
    let k_nominal = k_simplified(&summary, spec, constants.c_prime, None)?;

    let mut rows = Vec::with_capacity(strengths.len());
    for (i, &s) in strengths.iter().enumerate() {
        // the same seed for every strength: common random numbers across rows
        let cfg = base_config.with_kind(axis.violated_kind(s)?)?;
        let curve = stability_curve(&cfg, &options.grid, &metric, options.replicates)?;
        let knee = bootstrap_knee(
            &curve,
            options.resamples,
            options.level,
            derive_seed(base_config.seed, "stress-bootstrap", i as u64),
        )?;
        log::info!("{axis:?} strength {s}: knee {} [{}, {}]", knee.k_knee, knee.ci_low, knee.ci_high);
        let predicted = match axis {
            StressAxis::Dependence => Some(1.0 + dependence_inflation(1, s)?.c_rho),
            _ => None,
        };
        rows.push(StressRow {
            strength: s,
            parameter: axis.parameter(s),
            k_nominal,
            k_emp: knee.k_knee,
            k_emp_ci: (knee.ci_low, knee.ci_high),
            delta_k: knee.k_knee as i64 - k_nominal as i64,
            inflation: knee.k_knee as f64 / k_nominal as f64,
            predicted_inflation: predicted,
        });
    }

    let x: Vec<f64> = rows.iter().map(|r| r.strength).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.delta_k as f64).collect();
    let (slope, intercept, r_squared) = linear_fit(&x, &y);
    let max_inflation_mismatch = (axis == StressAxis::Dependence).then(|| {
        rows.iter()
            .map(|r| {
                let p = r.predicted_inflation.unwrap_or(1.0);
                (r.inflation / p).max(p / r.inflation)
            })
            .fold(1.0, f64::max)
    });
    Ok(StressReport {
        axis,
        trend_stats: TrendStats {
            slope,
            intercept,
            r_squared,
            nondecreasing: rows.windows(2).all(|w| w[1].k_emp >= w[0].k_emp),
            max_inflation_mismatch,
        },
        rows,
    })
}
