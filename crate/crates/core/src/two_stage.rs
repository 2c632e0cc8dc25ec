//! Two-stage estimator: size a first-stage sample until a lower confidence
//! bound on lambda_min clears the target, then size the second stage from
//! the first-stage plug-ins. Also the calibrated one-constant variant.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bounds::{ceil_to_k, deviation, k_simplified, BoundConstants, TargetSpec};
use crate::error::{Error, Result};
use crate::knee::{knee_point, KneeEstimate};
use crate::seed::{derive_seed, rng_for};
use crate::spectral::{empirical_covariance, floor_holds, spectral_summary, CovarianceMatrix, SpectralSummary, DEFAULT_Q, DEFAULT_RANK_TOL};
use crate::synth::{geometric_grid, generate, sample_scatter, stability_curve, CurveMetric, GeneratorConfig, PopulationRoot, SampleSource};

pub const DEFAULT_K0_INIT: u64 = 100;
pub const DEFAULT_K0_CAP: u64 = 1 << 20;

/// `lambda_hat_0 - C |S| (sqrt(r log(4/xi)/K0) + r log(4/xi)/K0)`.
pub fn lower_confidence_bound(summary: &SpectralSummary, k0: u64, xi: f64, c_opnorm: f64) -> f64 {
    summary.lambda_min - deviation(summary.op_norm, summary.r_eff, k0 as f64, (4.0 / xi).ln(), c_opnorm)
}

/// When the doubling loop may stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop as soon as the bound is positive, then require it to exceed delta.
    PositiveLcb,
    /// Keep doubling until the bound exceeds delta.
    #[default]
    PositiveGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageOptions {
    #[serde(default = "default_k0_init")]
    pub k0_init: u64,
    #[serde(default = "default_k0_cap")]
    pub k0_cap: u64,
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub stop_rule: StopRule,
}

fn default_k0_init() -> u64 {
    DEFAULT_K0_INIT
}
fn default_k0_cap() -> u64 {
    DEFAULT_K0_CAP
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        Self { k0_init: DEFAULT_K0_INIT, k0_cap: DEFAULT_K0_CAP, center: false, stop_rule: StopRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageResult {
    pub k0_final: u64,
    pub doublings: u32,
    pub lcb: f64,
    pub delta_hat: f64,
    pub k_second: u64,
    pub k_final: u64,
    pub stage1_summary: SpectralSummary,
    /// (K0, lower bound) for every first-stage attempt.
    pub lcb_trace: Vec<(u64, f64)>,
    pub rows_drawn: u64,
    /// Covariance of the accepted first-stage sample.
    pub stage1_covariance: CovarianceMatrix,
}

pub fn run_two_stage(
    source: &mut dyn SampleSource,
    spec: &TargetSpec,
    constants: &BoundConstants,
    options: &TwoStageOptions,
) -> Result<TwoStageResult> {
    spec.validate()?;
    constants.validate()?;
    if options.k0_init < 2 {
        return Err(Error::invalid("k0_init must be at least 2"));
    }
    if options.k0_cap < options.k0_init {
        return Err(Error::invalid("k0_cap must be at least k0_init"));
    }
    let mut k0 = options.k0_init;
    let mut doublings = 0u32;
    let mut trace = Vec::new();
    loop {
        let sample = source.draw(k0 as usize)?;
        let cov = empirical_covariance(&sample, options.center)?;
        let summary = spectral_summary(&cov, DEFAULT_Q, DEFAULT_RANK_TOL)?;
        let lcb = lower_confidence_bound(&summary, k0, spec.xi, constants.c_opnorm);
        trace.push((k0, lcb));
        log::debug!("first stage K0 = {k0}: lambda_hat = {:e}, lcb = {lcb:e}", summary.lambda_min);
        let done = match options.stop_rule {
            StopRule::PositiveLcb => lcb > 0.0,
            StopRule::PositiveGap => lcb > spec.delta,
        };
        if done {
            let delta_hat = lcb - spec.delta;
            if delta_hat <= 0.0 {
                return Err(Error::DeltaTooLarge { lcb, delta: spec.delta });
            }
            let k_second = k_simplified(&summary, spec, constants.c_prime, Some(lcb))?;
            return Ok(TwoStageResult {
                k0_final: k0,
                doublings,
                lcb,
                delta_hat,
                k_second,
                k_final: k0 + k_second,
                stage1_summary: summary,
                lcb_trace: trace,
                rows_drawn: source.rows_drawn(),
                stage1_covariance: cov,
            });
        }
        if k0 >= options.k0_cap {
            if lcb > 0.0 {
                return Err(Error::DeltaTooLarge { lcb, delta: spec.delta });
            }
            return Err(Error::CapExceeded(format!(
                "lower bound {lcb:e} still not positive at k0_cap = {}; increase k0_cap",
                options.k0_cap
            )));
        }
        k0 = (2 * k0).min(options.k0_cap);
        doublings += 1;
    }
}

/// Draws the second stage (fresh rows, stream `seed`) and checks
/// `lambda_min` of the covariance pooled over both stages against delta.
pub fn verify_two_stage(config: &GeneratorConfig, result: &TwoStageResult, delta: f64, seed: u64) -> Result<bool> {
    let root = PopulationRoot::new(&config.sigma)?;
    let stage2_cfg = config.with_seed(seed);
    let s2 = sample_scatter(&stage2_cfg, &root, result.k_second, "stage-two", 0)?;
    let s1: DMatrix<f64> = result.stage1_covariance.matrix() * result.k0_final as f64;
    let pooled = (s1 + s2) / result.k_final as f64;
    Ok(floor_holds(&pooled, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    pub alpha: f64,
    pub q: f64,
    #[serde(default)]
    pub fitted_on: Vec<String>,
}

/// The three spectral numbers the calibrated bound needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub frob_norm: f64,
    pub r_eff_tr: f64,
    pub lambda_q: f64,
}

impl CalibrationStats {
    pub fn from_summary(summary: &SpectralSummary, q: f64) -> Self {
        Self { frob_norm: summary.frob_norm, r_eff_tr: summary.r_eff_tr, lambda_q: summary.quantile_eigenvalue(q) }
    }

    /// `|S|_F^2 r_tr log(2/xi) / (lambda_q - delta)^2`.
    pub fn raw_value(&self, spec: &TargetSpec) -> Result<f64> {
        let gap = self.lambda_q - spec.delta;
        if !(gap > 0.0) {
            return Err(Error::NonPositiveGap { gap });
        }
        Ok(self.frob_norm.powi(2) * self.r_eff_tr * (2.0 / spec.xi).ln() / (gap * gap))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTask {
    pub id: String,
    pub stats: CalibrationStats,
    pub knee: u64,
    pub spec: TargetSpec,
}

pub fn k_calibrated_stats(stats: &CalibrationStats, spec: &TargetSpec, alpha: f64) -> Result<u64> {
    ceil_to_k(alpha * stats.raw_value(spec)?, "calibrated bound")
}

/// `ceil(alpha |S|_F^2 r_tr log(2/xi) / (lambda_q - delta)^2)`, with lambda_q
/// taken at `params.q`.
pub fn k_calibrated(summary: &SpectralSummary, spec: &TargetSpec, params: &CalibrationParams) -> Result<u64> {
    if !(params.alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    k_calibrated_stats(&CalibrationStats::from_summary(summary, params.q), spec, params.alpha)
}

/// Geometric mean of knee / raw bound over the tasks.
pub fn fit_alpha(tasks: &[CalibrationTask], q: f64) -> Result<CalibrationParams> {
    if tasks.is_empty() {
        return Err(Error::Empty("no calibration tasks".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("q = {q} must lie in (0, 1)")));
    }
    let mut log_sum = 0.0;
    for t in tasks {
        t.spec.validate()?;
        if t.knee == 0 {
            return Err(Error::invalid(format!("task {} has knee 0", t.id)));
        }
        log_sum += (t.knee as f64 / t.stats.raw_value(&t.spec)?).ln();
    }
    Ok(CalibrationParams {
        alpha: (log_sum / tasks.len() as f64).exp(),
        q,
        fitted_on: tasks.iter().map(|t| t.id.clone()).collect(),
    })
}

/// How a synthetic calibration task is measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProtocol {
    /// Rows used for the plug-in spectral statistics.
    pub pilot_rows: usize,
    pub grid: Vec<u64>,
    pub replicates: usize,
    pub q: f64,
}

/// Measures one task: plug-in statistics from a pilot sample and the knee of
/// the floor-coverage curve at `spec.delta`.
pub fn measure_task(
    id: &str,
    generator: &GeneratorConfig,
    spec: &TargetSpec,
    protocol: &TaskProtocol,
) -> Result<(CalibrationTask, KneeEstimate)> {
    let pilot_cfg = generator.with_seed(derive_seed(generator.seed, "pilot", 0));
    let pilot = generate(&pilot_cfg, protocol.pilot_rows)?;
    let summary = spectral_summary(&empirical_covariance(&pilot, false)?, protocol.q, DEFAULT_RANK_TOL)?;
    let curve = stability_curve(
        generator,
        &protocol.grid,
        &CurveMetric::FloorCoverage { floor: spec.delta },
        protocol.replicates,
    )?;
    let knee = knee_point(&curve)?;
    Ok((
        CalibrationTask {
            id: id.to_string(),
            stats: CalibrationStats::from_summary(&summary, protocol.q),
            knee: knee.k_knee,
            spec: *spec,
        },
        knee,
    ))
}

/// Family of diagonal Gaussian tasks for fitting and checking alpha. Task i has
/// spectrum `lambda_j = kappa^(-j/(d-1))` and floor `delta = ratio * lambda_min`,
/// with kappa and ratio drawn uniformly from the given ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskFamily {
    pub d: usize,
    pub condition: (f64, f64),
    pub floor_ratio: (f64, f64),
    pub xi: f64,
    pub protocol: TaskProtocol,
}

impl SyntheticTaskFamily {
    pub fn with_dim(d: usize) -> Self {
        Self {
            d,
            condition: (1.5, 2.5),
            floor_ratio: (0.25, 0.45),
            xi: 0.1,
            protocol: TaskProtocol {
                pilot_rows: 50 * d,
                grid: geometric_grid(d as u64, 60 * d as u64, 1.08),
                replicates: 12,
                q: DEFAULT_Q,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.d < 2 {
            return Err(Error::invalid("task dimension must be at least 2"));
        }
        if !ok(self.condition) || self.condition.0 < 1.0 {
            return Err(Error::invalid("condition range must be ordered and >= 1"));
        }
        if !ok(self.floor_ratio) || !(self.floor_ratio.0 > 0.0 && self.floor_ratio.1 < 1.0) {
            return Err(Error::invalid("floor_ratio range must be ordered within (0, 1)"));
        }
        Ok(())
    }

    /// Generator and target of task `index`.
    pub fn task(&self, index: u64, seed: u64) -> Result<(String, GeneratorConfig, TargetSpec)> {
        self.validate()?;
        let mut rng = rng_for(seed, "task-family", index);
        let kappa = self.condition.0 + (self.condition.1 - self.condition.0) * rng.random::<f64>();
        let ratio = self.floor_ratio.0 + (self.floor_ratio.1 - self.floor_ratio.0) * rng.random::<f64>();
        let d = self.d;
        let diag: Vec<f64> = (0..d).map(|j| kappa.powf(-(j as f64) / (d - 1) as f64)).collect();
        let lambda_min = diag[d - 1];
        let generator = GeneratorConfig::gaussian(CovarianceMatrix::diagonal(&diag)?, derive_seed(seed, "task", index))?;
        let spec = TargetSpec::new(ratio * lambda_min, self.xi, 1.0)?;
        Ok((format!("task-{index}"), generator, spec))
    }

    /// Measures tasks `first..first + count`.
    pub fn measure(&self, first: u64, count: u64, seed: u64) -> Result<Vec<(CalibrationTask, KneeEstimate)>> {
        (first..first + count)
            .map(|i| {
                let (id, generator, spec) = self.task(i, seed)?;
                measure_task(&id, &generator, &spec, &self.protocol)
            })
            .collect()
    }
}
