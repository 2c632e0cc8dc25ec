use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use spg_core::bounds::{k_simplified, TargetSpec};
use spg_core::knee::knee_point;
use spg_core::seed::derive_seed;
use spg_core::spectral::{spectral_summary, CovarianceMatrix, FeatureMatrix, DEFAULT_RANK_TOL};
use spg_core::synth::*;
use spg_core::Error;

fn dense_sigma() -> CovarianceMatrix {
    CovarianceMatrix::population(DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5])).unwrap()
}

fn sample_cov(f: &FeatureMatrix) -> DMatrix<f64> {
    let h = f.data();
    let mut s = DMatrix::<f64>::zeros(h.ncols(), h.ncols());
    for row in h.row_iter() {
        s += row.transpose() * row;
    }
    s / h.nrows() as f64
}

#[test]
fn gaussian_identity_lln() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(2), 1).unwrap();
    let c = sample_cov(&generate(&cfg, 100_000).unwrap());
    assert!((c - DMatrix::<f64>::identity(2, 2)).abs().max() < 0.03);
}

#[test]
fn ar1_without_dependence_is_gaussian() {
    let g = GeneratorConfig::gaussian(dense_sigma(), 4).unwrap();
    let a = g.with_kind(GeneratorKind::Ar1 { rho: 0.0 }).unwrap();
    assert_eq!(generate(&g, 500).unwrap(), generate(&a, 500).unwrap());
}

#[test]
fn generator_errors() {
    let g = GeneratorConfig::gaussian(CovarianceMatrix::identity(2), 1).unwrap();
    assert!(matches!(g.with_kind(GeneratorKind::StudentT { nu: 2.0 }), Err(Error::Domain(_))));
    assert!(matches!(g.with_kind(GeneratorKind::Ar1 { rho: 1.0 }), Err(Error::Domain(_))));
    let indefinite = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 0).unwrap();
    assert!(matches!(GeneratorConfig::gaussian(indefinite, 1), Err(Error::NotPsd { .. })));
}

#[test]
fn population_faithfulness_per_kind() {
    let k = 100_000;
    let sigma = dense_sigma();
    let kinds = [
        GeneratorKind::Gaussian,
        GeneratorKind::Sphere,
        GeneratorKind::Rademacher,
        GeneratorKind::StudentT { nu: 10.0 },
        GeneratorKind::Drifted { epsilon: 0.0, mode: DriftMode::Cycling, ramp: None },
        GeneratorKind::Ar1 { rho: 0.5 },
    ];
    let tol = 5.0 / (k as f64).sqrt() * 2.0;
    for (i, kind) in kinds.into_iter().enumerate() {
        let cfg = GeneratorConfig::new(kind.clone(), sigma.clone(), 40 + i as u64).unwrap();
        let err = (sample_cov(&generate(&cfg, k).unwrap()) - sigma.matrix()).abs().max();
        assert!(err <= tol, "{kind:?}: entrywise error {err} > {tol}");
    }
}

#[test]
fn ar1_stationary_covariance() {
    let k = 100_000;
    for rho in [0.0, 0.5, 0.9] {
        let cfg = GeneratorConfig::new(GeneratorKind::Ar1 { rho }, dense_sigma(), 8).unwrap();
        let err = (sample_cov(&generate(&cfg, k).unwrap()) - dense_sigma().matrix()).abs().max();
        let inflation = (1.0 + rho * rho) / (1.0 - rho * rho);
        let tol = 5.0 * (2.0 * inflation / k as f64).sqrt() * 2.0;
        assert!(err <= tol, "rho {rho}: error {err} > {tol}");
    }
}

/// Failure frequency from a separate stream: plain StdRng normals and the
/// nalgebra eigensolver.
fn failure_oracle(d: usize, k: usize, delta: f64, trials: usize, seed: u64) -> (f64, f64) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut fails = 0;
    for _ in 0..trials {
        let h = DMatrix::<f64>::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
        let s = h.tr_mul(&h) / k as f64;
        if s.symmetric_eigen().eigenvalues.min() < delta {
            fails += 1;
        }
    }
    let p = fails as f64 / trials as f64;
    (p, 1.96 * (p * (1.0 - p) / trials as f64).sqrt())
}

#[test]
fn failure_probability_matches_independent_simulation() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(4), 9).unwrap();
    for delta in [0.5, 0.75] {
        let est = estimate_failure_prob(&cfg, 200, delta, 2000).unwrap();
        let (p, hw) = failure_oracle(4, 200, delta, 2000, 9_000 + (delta * 100.0) as u64);
        let combined = (est.ci_half_width.powi(2) + hw.powi(2)).sqrt();
        assert!((est.p_hat - p).abs() <= 3.0 * combined + 1e-12, "delta {delta}: {} vs {p}", est.p_hat);
    }
}

#[test]
fn failure_probability_limits() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(4), 2).unwrap();
    assert_eq!(estimate_failure_prob(&cfg, 50, 0.0, 200).unwrap().p_hat, 0.0);
    assert_eq!(estimate_failure_prob(&cfg, 10, 1.0 + 5.0, 200).unwrap().p_hat, 1.0);
    assert!(estimate_failure_prob(&cfg, 10, 0.5, 99).is_err());
}

#[test]
fn failure_probability_nonincreasing_in_k() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(4), 12).unwrap();
    let est: Vec<FailureEstimate> =
        [20, 30, 40, 60, 100].iter().map(|&k| estimate_failure_prob(&cfg, k, 0.3, 400).unwrap()).collect();
    for w in est.windows(2) {
        let slack = 2.0 * 2.0 * (w[0].ci_half_width + w[1].ci_half_width);
        assert!(w[1].p_hat <= w[0].p_hat + slack, "{est:?}");
    }
    assert!(est[0].p_hat > est[4].p_hat);
}

#[test]
fn stability_curve_limits_and_determinism() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::diagonal(&[1.0, 0.5]).unwrap(), 21).unwrap();
    let grid = [10, 100, 1000, 5000, 20_000];
    let c = stability_curve(&cfg, &grid, &CurveMetric::LambdaMin, 4).unwrap();
    assert!((c.points()[4].score - 0.5).abs() < 0.03);

    let again = stability_curve(&cfg, &grid, &CurveMetric::LambdaMin, 2).unwrap();
    assert_eq!(again, stability_curve(&cfg, &grid, &CurveMetric::LambdaMin, 2).unwrap());
    assert!(stability_curve(&cfg, &[], &CurveMetric::LambdaMin, 2).is_err());
    assert!(stability_curve(&cfg, &[5, 5, 6, 7], &CurveMetric::LambdaMin, 2).is_err());
}

#[test]
fn stability_knee_near_calibrated_bound() {
    let d = 50;
    let delta = 0.1;
    let settings = CalibrationSettings { delta_ratio: delta, ..CalibrationSettings::new(31) };
    let c_prime = calibrate_constants(ConstantName::CPrime, &[(d, 256)], 0.95, 500, &settings).unwrap().fitted_value;
    let summary = spectral_summary(&CovarianceMatrix::identity(d), 0.1, DEFAULT_RANK_TOL).unwrap();
    let k_theory = k_simplified(&summary, &TargetSpec::new(delta, 0.1, 1.0).unwrap(), c_prime, None).unwrap();

    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(d), 32).unwrap();
    let grid: Vec<u64> = (1..=32).map(|i| 8 * i).collect();
    let curve = stability_curve(&cfg, &grid, &CurveMetric::FloorCoverage { floor: delta }, 20).unwrap();
    let knee = knee_point(&curve).unwrap().k_knee;
    let ratio = k_theory as f64 / knee as f64;
    assert!((1.0 / 3.0..=3.0).contains(&ratio), "k_simplified {k_theory} vs knee {knee}");
}

#[test]
fn stress_setups_follow_appendix_dimensions() {
    let tails = default_stress_setup(StressAxis::Tails);
    assert_eq!(tails.sigma.dim(), 200);
    let nus: Vec<f64> = StressAxis::Tails.default_strengths().iter().map(|&s| StressAxis::Tails.parameter(s)).collect();
    assert!(nus[0].is_infinite());
    for (got, want) in nus[1..].iter().zip([10.0, 5.0, 3.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(default_stress_setup(StressAxis::Drift).sigma.dim(), 50);
    assert_eq!(default_stress_setup(StressAxis::Dependence).sigma.dim(), 100);
    assert_eq!(StressAxis::Drift.default_strengths(), vec![0.0, 0.01, 0.05, 0.10]);
    assert_eq!(StressAxis::Dependence.default_strengths(), vec![0.0, 0.2, 0.5, 0.8]);
}

#[test]
fn gaussian_kurtosis_baseline() {
    // Table 2 baseline: 3.0
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(5), 17).unwrap();
    let d = diagnostics(&generate(&cfg, 100_000).unwrap(), 10_000).unwrap();
    assert!((d.kurtosis_per_coordinate_mean - 3.0).abs() < 0.2);
}

#[test]
fn repeated_windows_have_no_drift() {
    let cfg = GeneratorConfig::gaussian(CovarianceMatrix::identity(3), 5).unwrap();
    let block = generate(&cfg, 100).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).flat_map(|_| (0..100).map(|i| block.row(i))).collect();
    let d = diagnostics(&FeatureMatrix::from_rows(&rows).unwrap(), 100).unwrap();
    assert_eq!(d.drift_stat, vec![0.0; 4]);
    assert!(matches!(diagnostics(&block, 60), Err(Error::InsufficientData(_))));
}

/// Largest absolute eigenvalue of a symmetric 2x2 matrix.
fn opnorm2(m: &DMatrix<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = (a + c) / 2.0;
    let r = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    (mid + r).abs().max((mid - r).abs())
}

#[test]
fn ramped_drift_grows_across_windows() {
    let (k, window) = (500_000, 100_000);
    let kind = GeneratorKind::Drifted { epsilon: 0.1, mode: DriftMode::Radial, ramp: Some(k as u64) };
    let cfg = GeneratorConfig::new(kind, CovarianceMatrix::identity(2), 6).unwrap();
    let f = generate(&cfg, k).unwrap();
    let d = diagnostics(&f, window).unwrap();

    let covs: Vec<DMatrix<f64>> = (0..k / window)
        .map(|w| sample_cov(&f.slice_rows(w * window, (w + 1) * window).unwrap()))
        .collect();
    let oracle: Vec<f64> = covs.iter().map(|c| opnorm2(&(c - &covs[0])) / opnorm2(&covs[0])).collect();
    for (a, b) in d.drift_stat.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(oracle.windows(2).all(|w| w[1] > w[0]), "{oracle:?}");
}

fn nearest_rank(sorted: &[f64], a: f64) -> f64 {
    let n = sorted.len();
    sorted[((a * n as f64).ceil() as usize).clamp(1, n) - 1]
}

/// max over the grid of the c2 implied by the anchored deviation quantile
fn c2_by_hand(kind: &GeneratorKind, grid: &[(usize, u64)], anchor: f64, trials: usize, seed: u64) -> f64 {
    let xi = 1.0 - anchor;
    grid.iter()
        .enumerate()
        .map(|(i, &(d, n))| {
            let mut dev = opnorm_deviations(kind, d, n, trials, derive_seed(seed, "c2-cell", i as u64)).unwrap();
            dev.sort_by(f64::total_cmp);
            let u = d as f64 * (2.0 / xi).ln() / n as f64;
            nearest_rank(&dev, anchor) / (u.sqrt() + u)
        })
        .fold(0.0, f64::max)
}

#[test]
fn misspecified_c2_recomputed_by_hand() {
    let grid = [(20, 100), (20, 200)];
    let settings = CalibrationSettings { misspecification_nu: Some(5.0), ..CalibrationSettings::new(77) };
    let r = calibrate_constants(ConstantName::C2, &grid, 0.95, 500, &settings).unwrap();

    let raw = c2_by_hand(&GeneratorKind::Gaussian, &grid, 0.95, 500, 77);
    let t_raw = c2_by_hand(&GeneratorKind::StudentT { nu: 5.0 }, &grid, 0.95, 500, derive_seed(77, "c2-misspecified", 0));
    assert!((r.raw_value - raw).abs() < 1e-12 * raw);
    let ratio = t_raw / raw;
    assert!(ratio > 1.0, "t5 / gaussian c2 ratio {ratio}");
    assert!((r.inflation_ratio.unwrap() - ratio).abs() < 1e-12 * ratio);
    assert_eq!(r.inflation_flag, ratio > 1.5);

    let kcfg = GeneratorConfig::new(
        GeneratorKind::StudentT { nu: 5.0 },
        CovarianceMatrix::identity(20),
        derive_seed(77, "c2-kurtosis", 0),
    )
    .unwrap();
    let h = generate(&kcfg, 20_000).unwrap();
    let kurt: f64 = h
        .data()
        .column_iter()
        .map(|c| {
            let m = c.mean();
            let m2 = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64;
            let m4 = c.iter().map(|v| (v - m).powi(4)).sum::<f64>() / c.len() as f64;
            m4 / (m2 * m2)
        })
        .sum::<f64>()
        / 20.0;
    let adjustment = (kurt - 3.0) / 5.0;
    assert!((r.kurtosis_adjustment - adjustment).abs() < 1e-9);
    let fitted = if r.inflation_flag { raw * (1.0 + adjustment.max(0.0)) } else { raw };
    assert!((r.fitted_value - fitted).abs() < 1e-12 * fitted);
}

#[test]
fn c2_at_zero_anchor_uses_the_sample_minimum() {
    // anchor 0 takes the smallest deviation and xi = 1, so log(2/xi) = ln 2
    let grid = [(20, 100)];
    let settings = CalibrationSettings { misspecification_nu: None, ..CalibrationSettings::new(5) };
    let r = calibrate_constants(ConstantName::C2, &grid, 0.0, 500, &settings).unwrap();
    let dev = opnorm_deviations(&GeneratorKind::Gaussian, 20, 100, 500, derive_seed(5, "c2-cell", 0)).unwrap();
    let min = dev.iter().cloned().fold(f64::INFINITY, f64::min);
    let u = 20.0 * 2f64.ln() / 100.0;
    assert!((r.fitted_value - min / (u.sqrt() + u)).abs() < 1e-12);
    assert!(r.fitted_value > 0.0 && r.fitted_value.is_finite());
    assert!(calibrate_constants(ConstantName::C2, &grid, 1.0, 500, &settings).is_err());
}

#[test]
fn calibration_input_errors() {
    let s = CalibrationSettings::new(1);
    assert!(matches!(calibrate_constants(ConstantName::C2, &[], 0.95, 500, &s), Err(Error::Empty(_))));
    assert!(calibrate_constants(ConstantName::C2, &[(10, 100)], 0.95, 499, &s).is_err());
    assert!(calibrate_constants(ConstantName::C2, &[(10, 4)], 0.95, 500, &s).is_err());
}
