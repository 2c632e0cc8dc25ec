//! TOML run configurations. Every command config carries `schema_version`
//! and rejects unknown keys; the resolved form (defaults filled in, paths
//! made absolute) is what a report echoes back.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use spg_core::bounds::{BoundConstants, TargetSpec, DEFAULT_K_MAX};
use spg_core::ridge::RidgeProxyConfig;
use spg_core::spectral::{CovarianceMatrix, DEFAULT_Q};
use spg_core::synth::{ConstantName, GeneratorConfig, GeneratorKind, StressAxis, StressOptions};
use spg_core::two_stage::{CalibrationParams, StopRule, SyntheticTaskFamily, DEFAULT_K0_CAP, DEFAULT_K0_INIT};

use crate::CliError;

pub const SCHEMA_VERSION: &str = "1";

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSpec {
    Identity {
        d: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    Diagonal {
        values: Vec<f64>,
    },
    /// Diagonal `first * ratio^i`, i = 0..d.
    Geometric {
        d: usize,
        #[serde(default = "one")]
        first: f64,
        ratio: f64,
    },
    Dense {
        rows: Vec<Vec<f64>>,
    },
}

impl SigmaSpec {
    pub fn build(&self) -> spg_core::Result<CovarianceMatrix> {
        let bad = |m: &str| spg_core::Error::Invalid(m.to_string());
        match self {
            SigmaSpec::Identity { d, scale } => {
                if *d == 0 {
                    return Err(bad("sigma dimension must be positive"));
                }
                CovarianceMatrix::identity(*d).scaled(*scale)
            }
            SigmaSpec::Diagonal { values } => CovarianceMatrix::diagonal(values),
            SigmaSpec::Geometric { d, first, ratio } => {
                if *d == 0 {
                    return Err(bad("sigma dimension must be positive"));
                }
                let v: Vec<f64> = (0..*d).map(|i| first * ratio.powi(i as i32)).collect();
                CovarianceMatrix::diagonal(&v)
            }
            SigmaSpec::Dense { rows } => {
                let d = rows.len();
                if d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(bad("dense sigma must be a non-empty square matrix"));
                }
                CovarianceMatrix::population(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

fn gaussian() -> GeneratorKind {
    GeneratorKind::Gaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "gaussian")]
    pub family: GeneratorKind,
    pub sigma: SigmaSpec,
}

impl GeneratorSpec {
    pub fn build(&self, seed: u64) -> spg_core::Result<GeneratorConfig> {
        GeneratorConfig::new(self.family.clone(), self.sigma.build()?, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMode {
    #[default]
    TwoStage,
    Direct,
}

fn k0_init() -> u64 {
    DEFAULT_K0_INIT
}
fn k0_cap() -> u64 {
    DEFAULT_K0_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageSection {
    #[serde(default = "k0_init")]
    pub k0_init: u64,
    #[serde(default = "k0_cap")]
    pub k0_cap: u64,
    #[serde(default)]
    pub stop_rule: StopRule,
}

impl Default for TwoStageSection {
    fn default() -> Self {
        Self { k0_init: k0_init(), k0_cap: k0_cap(), stop_rule: StopRule::default() }
    }
}

fn direct_rows() -> usize {
    1000
}
fn k_max() -> u64 {
    DEFAULT_K_MAX
}
fn q() -> f64 {
    DEFAULT_Q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    pub target: TargetSpec,
    #[serde(default)]
    pub constants: BoundConstants,
    #[serde(default)]
    pub mode: EstimateMode,
    /// Feature CSV; exactly one of `features` and `generator` is required.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    /// Subtract the sample mean before forming the covariance.
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub two_stage: TwoStageSection,
    /// Rows drawn from the generator in direct mode.
    #[serde(default = "direct_rows")]
    pub direct_rows: usize,
    #[serde(default = "k_max")]
    pub k_max: u64,
    /// Quantile for lambda_q.
    #[serde(default = "q")]
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationParams>,
}

fn resamples() -> usize {
    spg_core::knee::DEFAULT_RESAMPLES
}
fn level() -> f64 {
    spg_core::knee::DEFAULT_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KneeConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    pub curve: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_theory: Option<u64>,
    #[serde(default = "resamples")]
    pub resamples: usize,
    #[serde(default = "level")]
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    /// Must agree with the command-line axis when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<StressAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub constants: BoundConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<StressOptions>,
    /// Long-form table for plotting; defaults next to the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrateKind {
    Constants,
    Alpha,
}

fn c2() -> ConstantName {
    ConstantName::C2
}
fn anchor() -> f64 {
    0.95
}
fn trials_constants() -> usize {
    500
}
fn default_grid() -> Vec<(usize, u64)> {
    vec![(20, 40), (20, 100), (20, 200), (50, 100), (50, 250), (50, 500)]
}
fn xi() -> f64 {
    0.1
}
fn delta_ratio() -> f64 {
    0.5
}
fn sweep_ratio() -> f64 {
    1.1
}
fn nu() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSection {
    #[serde(default = "c2")]
    pub target: ConstantName,
    /// (d, n) cells.
    #[serde(default = "default_grid")]
    pub grid: Vec<(usize, u64)>,
    #[serde(default = "anchor")]
    pub anchor: f64,
    #[serde(default = "trials_constants")]
    pub trials: usize,
    #[serde(default = "xi")]
    pub xi: f64,
    #[serde(default = "delta_ratio")]
    pub delta_ratio: f64,
    #[serde(default = "sweep_ratio")]
    pub sweep_ratio: f64,
    #[serde(default = "nu", skip_serializing_if = "Option::is_none")]
    pub misspecification_nu: Option<f64>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        Self {
            target: c2(),
            grid: default_grid(),
            anchor: anchor(),
            trials: trials_constants(),
            xi: xi(),
            delta_ratio: delta_ratio(),
            sweep_ratio: sweep_ratio(),
            misspecification_nu: nu(),
        }
    }
}

fn fit_count() -> u64 {
    5
}

fn family() -> SyntheticTaskFamily {
    SyntheticTaskFamily::with_dim(20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default = "family")]
    pub family: SyntheticTaskFamily,
    #[serde(default = "fit_count")]
    pub fit: u64,
    #[serde(default = "fit_count")]
    pub holdout: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { family: family(), fit: fit_count(), holdout: fit_count() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSection {
    /// Task CSV to fit on. Without it, synthetic tasks are measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<PathBuf>,
    #[serde(default = "q")]
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

impl Default for AlphaSection {
    fn default() -> Self {
        Self { tasks: None, holdout: None, q: q(), synthetic: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CalibrateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSection>,
}

fn ridge() -> RidgeProxyConfig {
    RidgeProxyConfig { lambda_reg: 0.1, noise_sigma: 1.0, feature_bound: 1.0, planted_weights: Vec::new() }
}
fn variance_generator() -> GeneratorSpec {
    GeneratorSpec { family: GeneratorKind::Gaussian, sigma: SigmaSpec::Identity { d: 5, scale: 1.0 } }
}
fn variance_k() -> u64 {
    50
}
fn variance_delta() -> f64 {
    0.3
}
fn variance_trials() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceCheckConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ridge")]
    pub ridge: RidgeProxyConfig,
    #[serde(default = "variance_generator")]
    pub generator: GeneratorSpec,
    #[serde(default = "variance_k")]
    pub k: u64,
    #[serde(default = "variance_delta")]
    pub delta: f64,
    #[serde(default = "variance_trials")]
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub rows: usize,
    /// Where the feature CSV goes; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Reads and parses a config, checking the schema version.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    match table.get("schema_version") {
        Some(toml::Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(v) => {
            return Err(CliError::Config(format!(
                "unsupported schema_version {v}; this build reads \"{SCHEMA_VERSION}\""
            )))
        }
        None => return Err(CliError::Config("missing schema_version".into())),
    }
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Interprets a config path relative to the directory holding the config.
pub fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
