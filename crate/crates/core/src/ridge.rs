//! Ridge regression on features: exact conditional predictive variance, the
//! lambda_min-based upper bound on it, and a planted-task accuracy score.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::spectral::{eigen_decompose, FeatureMatrix};
use crate::synth::{generate, GeneratorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeProxyConfig {
    pub lambda_reg: f64,
    pub noise_sigma: f64,
    pub feature_bound: f64,
    /// Planted linear target `f*(x) = <w, phi(x)>`. May be empty when only
    /// variances are needed.
    #[serde(default)]
    pub planted_weights: Vec<f64>,
}

impl RidgeProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::invalid(format!("lambda_reg = {} must be >= 0", self.lambda_reg)));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma = {} must be > 0", self.noise_sigma)));
        }
        if !(self.feature_bound > 0.0 && self.feature_bound.is_finite()) {
            return Err(Error::invalid(format!("feature_bound = {} must be > 0", self.feature_bound)));
        }
        if self.planted_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("planted weights must be finite"));
        }
        Ok(())
    }
}

/// `A = Phi^T Phi + lambda I`, factorized. Refuses singular systems.
fn factor(gram: &DMatrix<f64>, lambda: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    nalgebra::Cholesky::new(a).ok_or_else(|| {
        Error::Singular(format!(
            "K * Sigma_hat + {lambda} I is not positive definite; use lambda > 0 or more rows"
        ))
    })
}

/// `sigma^2 phi*^T A^{-1} (K Sigma_hat) A^{-1} phi*`.
pub fn predictive_variance_exact(
    features: &FeatureMatrix,
    config: &RidgeProxyConfig,
    test_point: &[f64],
) -> Result<f64> {
    config.validate()?;
    let d = features.d();
    if test_point.len() != d {
        return Err(Error::invalid(format!("test point has {} entries, expected {d}", test_point.len())));
    }
    let phi = features.data();
    let chol = factor(&phi.tr_mul(phi), config.lambda_reg)?;
    let u = chol.solve(&DVector::from_column_slice(test_point));
    let pu = phi * u;
    Ok(config.noise_sigma.powi(2) * pu.norm_squared())
}

/// The looser quadratic form `sigma^2 phi*^T A^{-1} phi*`.
pub fn predictive_variance_first_bound(
    features: &FeatureMatrix,
    config: &RidgeProxyConfig,
    test_point: &[f64],
) -> Result<f64> {
    config.validate()?;
    let phi = features.data();
    let chol = factor(&phi.tr_mul(phi), config.lambda_reg)?;
    let x = DVector::from_column_slice(test_point);
    let u = chol.solve(&x);
    Ok(config.noise_sigma.powi(2) * x.dot(&u))
}

/// `sigma^2 B^2 / (K delta + lambda)`.
pub fn variance_bound(k: u64, delta: f64, config: &RidgeProxyConfig) -> Result<f64> {
    let den = k as f64 * delta + config.lambda_reg;
    if !(den > 0.0) {
        return Err(Error::Domain("K * delta + lambda must be positive".into()));
    }
    Ok(config.noise_sigma.powi(2) * config.feature_bound.powi(2) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    pub attempted: usize,
    pub qualifying: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

/// Draws `trials` designs; every design with `lambda_min >= delta` is tested
/// at a uniform point on the B-sphere and at B times the weakest eigenvector.
pub fn check_variance_proposition(
    config: &RidgeProxyConfig,
    generator: &GeneratorConfig,
    k: u64,
    delta: f64,
    trials: usize,
) -> Result<VarianceCheck> {
    config.validate()?;
    if trials < 100 {
        return Err(Error::invalid(format!("trials = {trials}; at least 100 are required")));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let bound = variance_bound(k, delta, config)?;
    let d = generator.dim();
    let per_trial: Vec<Option<(usize, f64)>> = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<Option<(usize, f64)>> {
            let cfg = generator.with_seed(derive_seed(generator.seed, "variance-trial", i as u64));
            let design = generate(&cfg, k as usize)?;
            let cov = design.data().tr_mul(design.data()) / k as f64;
            let cov = (&cov + cov.transpose()) * 0.5;
            let eig = eigen_decompose(&cov)?;
            if *eig.values.last().unwrap() < delta {
                return Ok(None);
            }
            let mut rng = rng_for(generator.seed, "variance-test-point", i as u64);
            let mut z = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let n = z.norm();
            z *= config.feature_bound / n;
            let weakest = eig.vectors.column(d - 1) * config.feature_bound;
            let mut violations = 0;
            let mut worst: f64 = 0.0;
            for p in [z.as_slice().to_vec(), weakest.as_slice().to_vec()] {
                let v = predictive_variance_exact(&design, config, &p)?;
                if v > bound {
                    violations += 1;
                }
                worst = worst.max(v / bound);
            }
            Ok(Some((violations, worst)))
        })
        .collect::<Result<_>>()?;
    let qualifying = per_trial.iter().flatten().count();
    Ok(VarianceCheck {
        attempted: trials,
        qualifying,
        violations: per_trial.iter().flatten().map(|t| t.0).sum(),
        max_ratio: per_trial.iter().flatten().map(|t| t.1).fold(0.0, f64::max),
    })
}

/// Ridge solution `(Phi^T Phi + lambda I)^{-1} Phi^T y` from sufficient statistics.
pub fn ridge_weights(gram: &DMatrix<f64>, xty: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    Ok(factor(gram, lambda)?.solve(xty))
}

/// Fraction of test rows where `sign <w_hat, x>` matches `sign <w, x>`.
pub fn sign_accuracy(w_hat: &DVector<f64>, w: &DVector<f64>, test: &DMatrix<f64>) -> f64 {
    let pred = test * w_hat;
    let truth = test * w;
    let hits = pred.iter().zip(truth.iter()).filter(|(p, t)| (**p >= 0.0) == (**t >= 0.0)).count();
    hits as f64 / test.nrows() as f64
}

/// Fits ridge on `train` with labels `<w, x> + noise` and scores sign
/// agreement against noiseless labels on `test`.
pub fn planted_task_score(
    train: &FeatureMatrix,
    config: &RidgeProxyConfig,
    test: &FeatureMatrix,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    let d = train.d();
    if test.d() != d || config.planted_weights.len() != d {
        return Err(Error::invalid(format!(
            "dimension mismatch: train d = {d}, test d = {}, weights d = {}",
            test.d(),
            config.planted_weights.len()
        )));
    }
    let w = DVector::from_column_slice(&config.planted_weights);
    let mut rng = rng_for(seed, "ridge-noise", 0);
    let phi = train.data();
    let noise = DVector::<f64>::from_fn(train.k(), |_, _| StandardNormal.sample(&mut rng));
    let y = phi * &w + noise * config.noise_sigma;
    let w_hat = ridge_weights(&phi.tr_mul(phi), &phi.tr_mul(&y), config.lambda_reg)?;
    Ok(sign_accuracy(&w_hat, &w, test.data()))
}
