use nalgebra::DMatrix;

use spg_core::bounds::{BoundConstants, TargetSpec};
use spg_core::spectral::{spectral_summary, CovarianceMatrix, SpectralSummary, DEFAULT_RANK_TOL};
use spg_core::synth::{generate, FeatureStream, GeneratorConfig, SampleSource};
use spg_core::two_stage::*;
use spg_core::Error;

fn summary_of(diag: &[f64], q: f64) -> SpectralSummary {
    spectral_summary(&CovarianceMatrix::diagonal(diag).unwrap(), q, DEFAULT_RANK_TOL).unwrap()
}

fn gaussian(diag: &[f64], seed: u64) -> GeneratorConfig {
    GeneratorConfig::gaussian(CovarianceMatrix::diagonal(diag).unwrap(), seed).unwrap()
}

#[test]
fn lcb_examples() {
    let mut s = summary_of(&[1.0], 0.1);
    s.r_eff = 1.0;
    let xi = 4.0 / std::f64::consts::E;
    let oracle = 1.0 - ((1.0f64 / 4.0).sqrt() + 1.0 / 4.0);
    assert!((lower_confidence_bound(&s, 4, xi, 1.0) - oracle).abs() < 1e-12);
    assert!((oracle - 0.25).abs() < 1e-12);
    assert_eq!(lower_confidence_bound(&s, 4, 0.1, 0.0), s.lambda_min);
    assert!((lower_confidence_bound(&s, 1 << 50, 0.1, 3.0) - s.lambda_min).abs() < 1e-5);
    let trace: Vec<f64> = [10u64, 100, 1000, 10_000].iter().map(|&k| lower_confidence_bound(&s, k, 0.1, 3.0)).collect();
    assert!(trace.windows(2).all(|w| w[1] > w[0]));
    assert!(trace.iter().all(|&l| l <= s.lambda_min));
}

#[test]
fn two_stage_is_deterministic() {
    let spec = TargetSpec::new(0.25, 0.1, 1.0).unwrap();
    let run = || {
        let mut src = FeatureStream::new(&gaussian(&[1.0; 4], 11)).unwrap();
        run_two_stage(&mut src, &spec, &BoundConstants::default(), &TwoStageOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.k_final > 0);
    assert_eq!(a.k_final, a.k0_final + a.k_second);
    assert!(a.lcb <= a.stage1_summary.lambda_min);
    assert!(a.delta_hat > 0.0);
    let drawn: u64 = a.lcb_trace.iter().map(|t| t.0).sum();
    assert_eq!(a.rows_drawn, drawn);
}

#[test]
fn forced_failures() {
    let spec = TargetSpec::new(0.99, 0.1, 1.0).unwrap();
    let opts = TwoStageOptions { k0_init: 100, k0_cap: 800, ..TwoStageOptions::default() };
    let mut src = FeatureStream::new(&gaussian(&[1.0; 4], 3)).unwrap();
    let err = run_two_stage(&mut src, &spec, &BoundConstants::default(), &opts).unwrap_err();
    assert!(matches!(err, Error::CapExceeded(_) | Error::DeltaTooLarge { .. }), "{err}");

    let bad = TwoStageOptions { k0_init: 1, ..TwoStageOptions::default() };
    assert!(run_two_stage(&mut src, &spec, &BoundConstants::default(), &bad).is_err());
}

/// Re-executes the doubling loop by hand: plain outer products, the
/// library-independent nalgebra eigensolver, and the bounds written out.
fn replay(config: &GeneratorConfig, spec: &TargetSpec, c: &BoundConstants, k0_init: u64) -> (u64, u64, f64) {
    let mut stream = FeatureStream::new(config).unwrap();
    let mut k0 = k0_init;
    loop {
        let h = stream.draw(k0 as usize).unwrap();
        let h = h.data();
        let d = h.ncols();
        let mut s = DMatrix::<f64>::zeros(d, d);
        for row in h.row_iter() {
            s += row.transpose() * row;
        }
        s /= k0 as f64;
        let ev = s.clone().symmetric_eigen().eigenvalues;
        let (hi, lo, tr) = (ev.max(), ev.min(), ev.sum());
        let r = tr / hi;
        let l = (4.0 / spec.xi).ln();
        let lcb = lo - c.c_opnorm * hi * ((r * l / k0 as f64).sqrt() + r * l / k0 as f64);
        if lcb > spec.delta {
            let gap = lcb - spec.delta;
            let k = (c.c_prime * hi * hi * r * (2.0 / spec.xi).ln() / (gap * gap)).ceil() as u64;
            return (k0, k0 + k, lcb);
        }
        k0 *= 2;
    }
}

#[test]
fn two_stage_matches_replay() {
    let cfg = gaussian(&[1.0, 0.5, 0.25, 0.125], 11);
    let spec = TargetSpec::new(0.05, 0.1, 1.0).unwrap();
    let c = BoundConstants::default();
    let mut src = FeatureStream::new(&cfg).unwrap();
    let got = run_two_stage(&mut src, &spec, &c, &TwoStageOptions::default()).unwrap();
    let (k0, k_final, lcb) = replay(&cfg, &spec, &c, DEFAULT_K0_INIT);
    assert_eq!(got.k0_final, k0);
    assert_eq!(got.k_final, k_final);
    assert!((got.lcb - lcb).abs() < 1e-10);
}

#[test]
fn lcb_covers_population_floor() {
    // K0 = 200 draws from diag(1, .5, .25, .125); lambda_min = 0.125
    let c = BoundConstants::default();
    let covered = (0..500u64)
        .filter(|&i| {
            let h = generate(&gaussian(&[1.0, 0.5, 0.25, 0.125], 1000 + i), 200).unwrap();
            let cov = spg_core::spectral::empirical_covariance(&h, false).unwrap();
            let s = spectral_summary(&cov, 0.1, DEFAULT_RANK_TOL).unwrap();
            lower_confidence_bound(&s, 200, 0.1, c.c_opnorm) <= 0.125
        })
        .count();
    assert!(covered as f64 / 500.0 >= 1.0 - 0.05 - 0.02);
}

fn task(id: &str, frob2: f64, knee: u64) -> CalibrationTask {
    // log(2/xi) = 1 and lambda_q - delta = 1, so the raw bound is frob^2
    let xi = 2.0 / std::f64::consts::E;
    CalibrationTask {
        id: id.into(),
        stats: CalibrationStats { frob_norm: frob2.sqrt(), r_eff_tr: 1.0, lambda_q: 1.5 },
        knee,
        spec: TargetSpec::new(0.5, xi, 1.0).unwrap(),
    }
}

#[test]
fn k_calibrated_examples() {
    let t = task("unit", 1.0, 1);
    assert_eq!(k_calibrated_stats(&t.stats, &t.spec, 1.0).unwrap(), 1);

    let s = summary_of(&[4.0, 1.0, 1.0, 1.0, 1.0], 0.2);
    let spec = TargetSpec::new(0.5, 0.1, 1.0).unwrap();
    let params = CalibrationParams { alpha: 0.05, q: 0.2, fitted_on: vec![] };
    let oracle = (0.05 * 20.0 * 3.2 * 20f64.ln() / 0.25).ceil() as u64;
    assert_eq!(k_calibrated(&s, &spec, &params).unwrap(), oracle);
    assert_eq!(oracle, 39);

    let half = TargetSpec::new(0.75, 0.1, 1.0).unwrap();
    let stats = CalibrationStats::from_summary(&s, 0.2);
    let ratio = stats.raw_value(&half).unwrap() / stats.raw_value(&spec).unwrap();
    assert!((ratio - 4.0).abs() < 1e-12);

    let above = TargetSpec::new(1.0, 0.1, 1.0).unwrap();
    assert!(matches!(k_calibrated(&s, &above, &params), Err(Error::NonPositiveGap { .. })));
}

#[test]
fn fit_alpha_examples() {
    let p = fit_alpha(&[task("a", 7.0, 7)], 0.1).unwrap();
    assert!((p.alpha - 1.0).abs() < 1e-12);

    // raw / knee = 2 and 8
    let p = fit_alpha(&[task("a", 8.0, 4), task("b", 32.0, 4)], 0.1).unwrap();
    let oracle = ((0.5f64).ln() / 2.0 + (0.125f64).ln() / 2.0).exp();
    assert!((p.alpha - oracle).abs() < 1e-12);
    assert!((p.alpha - 0.25).abs() < 1e-12);
    assert_eq!(p.fitted_on, vec!["a".to_string(), "b".to_string()]);

    assert!(matches!(fit_alpha(&[], 0.1), Err(Error::Empty(_))));
}

#[test]
fn fit_alpha_in_sample_consistency() {
    let tasks: Vec<CalibrationTask> = [(3.1e12, 40u64), (7.7e12, 95), (1.9e12, 33), (5.0e12, 61)]
        .iter()
        .enumerate()
        .map(|(i, &(raw, knee))| task(&format!("t{i}"), raw, knee * 1_000_000_000))
        .collect();
    let p = fit_alpha(&tasks, 0.1).unwrap();
    let mut ratios: Vec<f64> = tasks
        .iter()
        .map(|t| k_calibrated_stats(&t.stats, &t.spec, p.alpha).unwrap() as f64 / t.knee as f64)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = (ratios[1] + ratios[2]) / 2.0;
    assert!((median - 1.0).abs() < 0.5, "median ratio {median}");

    // refit on its own predictions
    let predicted: Vec<CalibrationTask> = tasks
        .iter()
        .map(|t| CalibrationTask { knee: k_calibrated_stats(&t.stats, &t.spec, p.alpha).unwrap(), ..t.clone() })
        .collect();
    let again = fit_alpha(&predicted, 0.1).unwrap();
    assert!((again.alpha - p.alpha).abs() <= 1e-9 * p.alpha);
}
