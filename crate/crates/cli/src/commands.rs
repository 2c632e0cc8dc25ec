use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spg_core::bounds::{k0_requirement, k_explicit, k_simplified};
use spg_core::io::{read_curve, read_features, read_tasks, write_features, write_stress_table};
use spg_core::knee::{bootstrap_knee, error_ratio, KneeEstimate};
use spg_core::ridge::{check_variance_proposition, VarianceCheck};
use spg_core::spectral::{empirical_covariance, spectral_summary, FeatureMatrix, SpectralSummary, DEFAULT_RANK_TOL};
use spg_core::synth::{
    calibrate_constants, default_stress_setup, generate, run_stress_suite, CalibrationSettings, ConstantCalibrationReport,
    FeatureStream, GeneratorConfig, MatrixSource, SampleSource, StressAxis, StressReport,
};
use spg_core::two_stage::{
    fit_alpha, k_calibrated, k_calibrated_stats, run_two_stage, CalibrationTask, TwoStageOptions,
};
use spg_core::Error;

use crate::config::*;
use crate::{CalibrateArg, CliError, Command, CommonArgs, Report};

pub fn dispatch(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Estimate(c) => estimate(c),
        Command::Knee(c) => knee(c),
        Command::Stress { axis, common } => stress((*axis).into(), common),
        Command::Calibrate { kind, common } => calibrate(*kind, common),
        Command::VarianceCheck(c) => variance_check(c),
        Command::Gen(c) => gen(c),
    }
}

/// Directory that relative paths inside a config refer to.
fn config_dir(args: &CommonArgs) -> Result<PathBuf, CliError> {
    let abs = std::path::absolute(&args.config)?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOutcome {
    pub k0_final: u64,
    pub doublings: u32,
    pub k_second: u64,
    pub rows_drawn: u64,
    /// (K0, lower bound) per first-stage attempt.
    pub lcb_trace: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResults {
    pub mode: EstimateMode,
    pub d: usize,
    /// Rows available in the input file, or drawn in direct mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_input: Option<u64>,
    pub k_final: u64,
    /// Simplified bound at the plug-in floor (the lower confidence bound in
    /// two-stage mode).
    pub k_simplified: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_explicit: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_explicit_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0_requirement: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_calibrated: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageOutcome>,
    pub spectral: SpectralSummary,
}

fn estimate(args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: EstimateConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let base = config_dir(args)?;
    cfg.features = cfg.features.map(|p| resolve_path(&base, &p));
    cfg.target.validate()?;
    cfg.constants.validate()?;
    if !(cfg.q > 0.0 && cfg.q < 1.0) {
        return Err(CliError::Config(format!("q = {} must lie in (0, 1)", cfg.q)));
    }

    let features = match (&cfg.features, &cfg.generator) {
        (Some(p), None) => Some(read_features(p)?),
        (None, Some(_)) => None,
        _ => return Err(CliError::Config("give exactly one of `features` and `generator`".into())),
    };
    let generator = cfg.generator.as_ref().map(|g| g.build(cfg.seed)).transpose()?;
    let k_input = features.as_ref().map(|f| f.k() as u64);

    let (summary, k_simple, lcb, two_stage) = match cfg.mode {
        EstimateMode::Direct => {
            let sample = match (&features, &generator) {
                (Some(f), _) => f.clone(),
                (None, Some(g)) => generate(g, cfg.direct_rows)?,
                _ => unreachable!(),
            };
            let summary = spectral_summary(&empirical_covariance(&sample, cfg.center)?, cfg.q, DEFAULT_RANK_TOL)?;
            let k = k_simplified(&summary, &cfg.target, cfg.constants.c_prime, None)?;
            (summary, k, None, None)
        }
        EstimateMode::TwoStage => {
            let mut source: Box<dyn SampleSource> = match (features.clone(), &generator) {
                (Some(f), _) => Box::new(MatrixSource::new(f)),
                (None, Some(g)) => Box::new(FeatureStream::new(g)?),
                _ => unreachable!(),
            };
            let options = TwoStageOptions {
                k0_init: cfg.two_stage.k0_init,
                k0_cap: cfg.two_stage.k0_cap,
                center: cfg.center,
                stop_rule: cfg.two_stage.stop_rule,
            };
            let r = run_two_stage(source.as_mut(), &cfg.target, &cfg.constants, &options)?;
            let outcome = TwoStageOutcome {
                k0_final: r.k0_final,
                doublings: r.doublings,
                k_second: r.k_second,
                rows_drawn: r.rows_drawn,
                lcb_trace: r.lcb_trace.clone(),
            };
            (r.stage1_summary, r.k_second, Some((r.lcb, r.delta_hat, r.k_final)), Some(outcome))
        }
    };

    let (k_expl, note) = match k_explicit(&summary, &cfg.target, &cfg.constants, cfg.k_max) {
        Ok(k) => (Some(k), None),
        Err(e @ (Error::CapExceeded(_) | Error::NonPositiveGap { .. })) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let k0_req = k0_requirement(&summary, cfg.target.xi, cfg.constants.c_dprime).ok();
    let k_cal = match &cfg.calibration {
        Some(p) => Some(k_calibrated(&summary, &cfg.target, p)?),
        None => None,
    };
    let results = EstimateResults {
        mode: cfg.mode,
        d: summary.dim(),
        k_input: k_input.or((cfg.mode == EstimateMode::Direct).then_some(cfg.direct_rows as u64)),
        k_final: lcb.map(|l| l.2).unwrap_or(k_simple),
        k_simplified: k_simple,
        lcb: lcb.map(|l| l.0),
        delta_hat: lcb.map(|l| l.1),
        k_explicit: k_expl,
        k_explicit_note: note,
        k0_requirement: k0_req,
        k_calibrated: k_cal,
        two_stage,
        spectral: summary,
    };
    let seed = cfg.seed;
    Report::new("estimate", seed, cfg, results).to_toml()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeResults {
    pub points: usize,
    pub has_replicates: bool,
    pub knee: KneeEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_ratio: Option<f64>,
}

fn knee(args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: KneeConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.curve = resolve_path(&config_dir(args)?, &cfg.curve);
    let curve = read_curve(&cfg.curve)?;
    let knee = bootstrap_knee(&curve, cfg.resamples, cfg.level, cfg.seed)?;
    let ratio = cfg.k_theory.map(|k| error_ratio(k, &knee)).transpose()?;
    let results = KneeResults {
        points: curve.points().len(),
        has_replicates: curve.replicates().is_some(),
        knee,
        error_ratio: ratio,
    };
    let seed = cfg.seed;
    Report::new("knee", seed, cfg, results).to_toml()
}

fn stress(axis: StressAxis, args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: StressConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.axis.is_some_and(|a| a != axis) {
        return Err(CliError::Config(format!("config axis {:?} disagrees with command-line axis {axis:?}", cfg.axis.unwrap())));
    }
    let base = config_dir(args)?;
    let setup = default_stress_setup(axis);
    cfg.axis = Some(axis);
    cfg.strengths.get_or_insert_with(|| axis.default_strengths());
    cfg.sigma.get_or_insert_with(|| SigmaSpec::Identity {
        d: setup.sigma.dim(),
        scale: setup.sigma.matrix()[(0, 0)],
    });
    cfg.target.get_or_insert(setup.spec);
    cfg.options.get_or_insert_with(|| setup.options.clone());
    let plot = match (&cfg.plot, &args.out) {
        (Some(p), _) => resolve_path(&base, p),
        (None, Some(out)) => std::path::absolute(out.with_extension("csv"))?,
        (None, None) => std::path::absolute(format!("stress-{}.csv", axis_name(axis)))?,
    };
    cfg.plot = Some(plot.clone());

    let base_cfg = GeneratorConfig::gaussian(cfg.sigma.as_ref().unwrap().build()?, cfg.seed)?;
    let report: StressReport = run_stress_suite(
        axis,
        cfg.strengths.as_ref().unwrap(),
        &base_cfg,
        cfg.target.as_ref().unwrap(),
        &cfg.constants,
        cfg.options.as_ref().unwrap(),
    )?;
    write_stress_table(&plot, &report)?;
    let seed = cfg.seed;
    Report::new("stress", seed, cfg, report).to_toml()
}

fn axis_name(axis: StressAxis) -> &'static str {
    match axis {
        StressAxis::Drift => "drift",
        StressAxis::Tails => "tails",
        StressAxis::Dependence => "dependence",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRatio {
    pub id: String,
    pub knee: u64,
    pub k_calibrated: u64,
    /// `k_calibrated / knee`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaResults {
    pub alpha: f64,
    pub q: f64,
    pub fitted_on: Vec<String>,
    pub fit: Vec<TaskRatio>,
    pub holdout: Vec<TaskRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_median_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CalibrateResults {
    Constants(ConstantCalibrationReport),
    Alpha(AlphaResults),
}

fn calibrate(kind: CalibrateArg, args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: CalibrateConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let kind = match kind {
        CalibrateArg::Constants => CalibrateKind::Constants,
        CalibrateArg::Alpha => CalibrateKind::Alpha,
    };
    if cfg.kind.is_some_and(|k| k != kind) {
        return Err(CliError::Config(format!("config kind {:?} disagrees with command-line kind {kind:?}", cfg.kind.unwrap())));
    }
    cfg.kind = Some(kind);
    let results = match kind {
        CalibrateKind::Constants => {
            let c = cfg.constants.get_or_insert_with(ConstantsSection::default).clone();
            let settings = CalibrationSettings {
                seed: cfg.seed,
                xi: c.xi,
                delta_ratio: c.delta_ratio,
                sweep_ratio: c.sweep_ratio,
                misspecification_nu: c.misspecification_nu,
            };
            CalibrateResults::Constants(calibrate_constants(c.target, &c.grid, c.anchor, c.trials, &settings)?)
        }
        CalibrateKind::Alpha => {
            let base = config_dir(args)?;
            let a = cfg.alpha.get_or_insert_with(AlphaSection::default);
            a.tasks = a.tasks.as_ref().map(|p| resolve_path(&base, p));
            a.holdout = a.holdout.as_ref().map(|p| resolve_path(&base, p));
            if a.tasks.is_none() {
                a.synthetic.get_or_insert_with(SyntheticSection::default);
            } else if a.synthetic.is_some() {
                return Err(CliError::Config("give either alpha.tasks or alpha.synthetic, not both".into()));
            }
            CalibrateResults::Alpha(calibrate_alpha(a, cfg.seed)?)
        }
    };
    let seed = cfg.seed;
    Report::new("calibrate", seed, cfg, results).to_toml()
}

fn task_ratios(tasks: &[CalibrationTask], alpha: f64) -> Result<Vec<TaskRatio>, CliError> {
    tasks
        .iter()
        .map(|t| {
            let k = k_calibrated_stats(&t.stats, &t.spec, alpha)?;
            Ok(TaskRatio { id: t.id.clone(), knee: t.knee, k_calibrated: k, ratio: k as f64 / t.knee as f64 })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn calibrate_alpha(a: &AlphaSection, seed: u64) -> Result<AlphaResults, CliError> {
    let (fit, holdout) = match (&a.tasks, &a.synthetic) {
        (Some(p), _) => {
            let holdout = a.holdout.as_ref().map(|h| read_tasks(h)).transpose()?.unwrap_or_default();
            (read_tasks(p)?, holdout)
        }
        (None, Some(s)) => {
            if s.fit == 0 {
                return Err(CliError::Config("alpha.synthetic.fit must be at least 1".into()));
            }
            let measured = s.family.measure(0, s.fit + s.holdout, seed)?;
            let mut tasks: Vec<CalibrationTask> = measured.into_iter().map(|(t, _)| t).collect();
            let holdout = tasks.split_off(s.fit as usize);
            (tasks, holdout)
        }
        (None, None) => unreachable!("resolved above"),
    };
    let params = fit_alpha(&fit, a.q)?;
    let fit_ratios = task_ratios(&fit, params.alpha)?;
    let holdout_ratios = task_ratios(&holdout, params.alpha)?;
    for r in &holdout_ratios {
        log::info!("held-out {}: K_cal = {}, knee = {}, ratio {:.3}", r.id, r.k_calibrated, r.knee, r.ratio);
    }
    Ok(AlphaResults {
        alpha: params.alpha,
        q: params.q,
        fitted_on: params.fitted_on,
        fit: fit_ratios,
        holdout_median_ratio: median(holdout_ratios.iter().map(|r| r.ratio).collect()),
        holdout: holdout_ratios,
    })
}

fn variance_check(args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: VarianceCheckConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let generator = cfg.generator.build(cfg.seed)?;
    let results: VarianceCheck = check_variance_proposition(&cfg.ridge, &generator, cfg.k, cfg.delta, cfg.trials)?;
    let seed = cfg.seed;
    Report::new("variance-check", seed, cfg, results).to_toml()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResults {
    pub rows: usize,
    pub d: usize,
    pub output: PathBuf,
}

fn gen(args: &CommonArgs) -> Result<String, CliError> {
    let mut cfg: GenConfig = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let output = match (&args.out, &cfg.output) {
        (Some(o), _) => std::path::absolute(o)?,
        (None, Some(o)) => resolve_path(&config_dir(args)?, o),
        (None, None) => return Err(CliError::Config("gen needs an output path: set `output` or pass --out".into())),
    };
    cfg.output = Some(output.clone());
    let features: FeatureMatrix = generate(&cfg.generator.build(cfg.seed)?, cfg.rows)?;
    write_features(&output, &features)?;
    let results = GenResults { rows: features.k(), d: features.d(), output };
    let seed = cfg.seed;
    Report::new("gen", seed, cfg, results).to_toml()
}
