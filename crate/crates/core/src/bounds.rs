//! Sample-size bounds and tail probabilities for the event
//! `lambda_min(Sigma_hat_K) >= delta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralSummary;

/// Default cap for the explicit fixed-point bound.
pub const DEFAULT_K_MAX: u64 = 1_000_000;

/// Bounds larger than this are reported as overflow instead of as integers.
const K_LIMIT: f64 = 9.0e15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    /// Operator-norm deviation constant C.
    pub c_opnorm: f64,
    /// Constant of the simplified bound, C' = C^2.
    pub c_prime: f64,
    /// Constant of the first-stage requirement, C'' = 16 C^2.
    pub c_dprime: f64,
    /// Fourth-moment constant.
    pub c1: f64,
    /// Truncation constant, tied to c1 through c1 * c2_trunc^2 = 1.
    pub c2_trunc: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self::from_c(3.0, 3.5)
    }
}

impl BoundConstants {
    /// Builds the family from C and c1: C' = C^2, C'' = 16 C^2, c2 = 1/sqrt(c1).
    pub fn from_c(c_opnorm: f64, c1: f64) -> Self {
        Self {
            c_opnorm,
            c_prime: c_opnorm * c_opnorm,
            c_dprime: 16.0 * c_opnorm * c_opnorm,
            c1,
            c2_trunc: 1.0 / c1.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_opnorm", self.c_opnorm),
            ("c_prime", self.c_prime),
            ("c_dprime", self.c_dprime),
            ("c1", self.c1),
            ("c2_trunc", self.c2_trunc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("constant {name} = {v} must be positive")));
            }
        }
        let coupling = self.c1 * self.c2_trunc * self.c2_trunc;
        if (coupling - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "c1 * c2_trunc^2 = {coupling}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub delta: f64,
    pub xi: f64,
    #[serde(default = "one")]
    pub sigma: f64,
}

fn one() -> f64 {
    1.0
}

impl TargetSpec {
    pub fn new(delta: f64, xi: f64, sigma: f64) -> Result<Self> {
        let s = Self { delta, xi, sigma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta = {} must be positive", self.delta)));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::invalid(format!("xi = {} must lie in (0, 1)", self.xi)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma = {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinTerms {
    pub v_tilde: f64,
    pub r_bound: f64,
    pub b_k: f64,
    pub delta_gap: f64,
    /// Set when `delta_gap <= 0`; the bound is then vacuous.
    pub gap_flag: bool,
}

fn truncation_level(k: f64, spec: &TargetSpec, constants: &BoundConstants) -> f64 {
    constants.c2_trunc.powi(2) * spec.sigma.powi(2) * (8.0 * k / spec.xi).ln()
}

pub fn bernstein_terms(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    k: u64,
    constants: &BoundConstants,
) -> Result<BernsteinTerms> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let v_tilde = 2.0 * constants.c1 * spec.sigma.powi(4) + 2.0 * summary.op_norm.powi(2);
    let b_k = truncation_level(k as f64, spec, constants);
    let delta_gap = summary.lambda_min - spec.delta;
    Ok(BernsteinTerms {
        v_tilde,
        r_bound: b_k + summary.op_norm,
        b_k,
        delta_gap,
        gap_flag: delta_gap <= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub probability: f64,
    pub vacuous: bool,
}

/// `r_eff * exp(-K D^2 / (2 v + 2/3 R D))`, clamped to [0, 1].
pub fn bernstein_failure_bound(k: u64, terms: &BernsteinTerms, r_eff: f64) -> TailBound {
    let gap = terms.delta_gap;
    if !(gap > 0.0) {
        log::warn!("bernstein bound is vacuous: gap {gap:e} <= 0");
        return TailBound { probability: 1.0, vacuous: true };
    }
    let exponent = k as f64 * gap * gap / (2.0 * terms.v_tilde + (2.0 / 3.0) * terms.r_bound * gap);
    let p = (r_eff * (-exponent).exp()).clamp(0.0, 1.0);
    TailBound { probability: p, vacuous: false }
}

/// Right-hand side of the explicit bound evaluated at a trial K.
pub fn explicit_rhs(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    constants: &BoundConstants,
    k: f64,
) -> f64 {
    let gap = summary.lambda_min - spec.delta;
    let v_tilde = 2.0 * constants.c1 * spec.sigma.powi(4) + 2.0 * summary.op_norm.powi(2);
    let r = truncation_level(k, spec, constants) + summary.op_norm;
    let log_term = (4.0 * summary.r_eff / (3.0 * spec.xi)).ln();
    (2.0 * v_tilde / (gap * gap) + 2.0 * r / (3.0 * gap)) * log_term
}

fn check_gap(gap: f64) -> Result<()> {
    if gap > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveGap { gap })
    }
}

pub(crate) fn ceil_to_k(x: f64, what: &str) -> Result<u64> {
    if !x.is_finite() || x > K_LIMIT {
        return Err(Error::CapExceeded(format!("{what} = {x:e} is beyond representable sample sizes")));
    }
    Ok(snap(x).ceil().max(1.0) as u64)
}

/// Smallest K <= k_max with K >= RHS(K), where RHS depends on K through the
/// truncation level.
pub fn k_explicit(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    constants: &BoundConstants,
    k_max: u64,
) -> Result<u64> {
    let gap = summary.lambda_min - spec.delta;
    check_gap(gap)?;
    let rhs = |k: f64| explicit_rhs(summary, spec, constants, k);

    let mut k = k_simplified_real(summary, spec, constants.c_prime, None).max(1.0);
    let mut converged = false;
    for _ in 0..100 {
        let next = rhs(k).max(1.0);
        let step = (next - k).abs();
        k = next;
        if step <= 1.0 {
            converged = true;
            break;
        }
    }
    if !converged || !k.is_finite() {
        let fallback = rhs(k_max as f64).ceil();
        log::warn!("fixed point did not settle; conservative fallback K = {fallback}");
        if fallback > k_max as f64 {
            return Err(Error::CapExceeded(format!(
                "explicit bound exceeds k_max = {k_max}; conservative fallback K = {fallback}"
            )));
        }
        return Ok(fallback.max(1.0) as u64);
    }

    // g(K) = K - RHS(K) is convex with a single sign change, so a short local
    // walk from the ceiling lands on the smallest integer solution.
    let mut kk = k.ceil().max(1.0);
    while kk < rhs(kk) {
        kk += 1.0;
    }
    while kk > 1.0 && kk - 1.0 >= rhs(kk - 1.0) {
        kk -= 1.0;
    }
    if kk > k_max as f64 {
        let fallback = rhs(k_max as f64).ceil();
        return Err(Error::CapExceeded(format!(
            "explicit bound K = {kk} exceeds k_max = {k_max}; conservative fallback K = {fallback}"
        )));
    }
    Ok(kk as u64)
}

/// `C ||S|| (sqrt(r log(2/xi)/K) + r log(2/xi)/K)`.
pub fn opnorm_deviation(summary: &SpectralSummary, k: u64, xi: f64, c_opnorm: f64) -> f64 {
    deviation(summary.op_norm, summary.r_eff, k as f64, (2.0 / xi).ln(), c_opnorm)
}

pub(crate) fn deviation(op_norm: f64, r_eff: f64, k: f64, log_term: f64, c: f64) -> f64 {
    let u = r_eff * log_term / k;
    c * op_norm * (u.sqrt() + u)
}

/// Real-valued simplified bound, before the ceiling.
pub fn k_simplified_real(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    c_prime: f64,
    lambda_floor_override: Option<f64>,
) -> f64 {
    let floor = lambda_floor_override.unwrap_or(summary.lambda_min);
    let gap = floor - spec.delta;
    c_prime * summary.op_norm.powi(2) * summary.r_eff * (2.0 / spec.xi).ln() / (gap * gap)
}

/// `ceil(C' ||S||^2 r_eff log(2/xi) / gap^2)`.
pub fn k_simplified(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    c_prime: f64,
    lambda_floor_override: Option<f64>,
) -> Result<u64> {
    let floor = lambda_floor_override.unwrap_or(summary.lambda_min);
    check_gap(floor - spec.delta)?;
    ceil_to_k(k_simplified_real(summary, spec, c_prime, lambda_floor_override), "simplified bound")
}

/// `ceil(C'' ||S||^2 r_eff log(4/xi) / lambda_min^2)`.
pub fn k0_requirement(summary: &SpectralSummary, xi: f64, c_dprime: f64) -> Result<u64> {
    if !(summary.lambda_min > 0.0) {
        return Err(Error::Degenerate("lambda_min = 0, no first-stage size suffices".into()));
    }
    let x = c_dprime * summary.op_norm.powi(2) * summary.r_eff * (4.0 / xi).ln()
        / summary.lambda_min.powi(2);
    ceil_to_k(x, "first-stage requirement")
}

/// Real-valued rescaling factor `((1 - rho0)/(1 - rho))^2`.
pub fn delta_rescale_factor(rho0: f64, rho: f64) -> Result<f64> {
    for (name, r) in [("rho0", rho0), ("rho", rho)] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Domain(format!("{name} = {r} must lie in (0, 1)")));
        }
    }
    Ok(((1.0 - rho0) / (1.0 - rho)).powi(2))
}

/// Moves a known sample size from floor ratio `rho0 = delta/lambda_min` to `rho`.
pub fn delta_rescale(k_star: u64, rho0: f64, rho: f64) -> Result<u64> {
    let f = delta_rescale_factor(rho0, rho)?;
    ceil_to_k(k_star as f64 * f, "rescaled bound")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftCorrection {
    pub k: u64,
    pub additive: u64,
    pub degraded_floor: f64,
}

/// Default constant in front of epsilon in the degraded floor.
pub const DEFAULT_DRIFT_FLOOR_C1: f64 = 1.0;

pub fn drift_correction(
    k_nominal: u64,
    epsilon: f64,
    summary: &SpectralSummary,
    delta: f64,
    c_drift: f64,
    c_floor: f64,
) -> Result<DriftCorrection> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be nonnegative"));
    }
    let gap = summary.lambda_min - delta;
    check_gap(gap)?;
    let add = c_drift * epsilon * epsilon * summary.op_norm / (gap * gap);
    let additive = if add > 0.0 { ceil_to_k(add, "drift term")? } else { 0 };
    Ok(DriftCorrection {
        k: k_nominal + additive,
        additive,
        degraded_floor: delta - c_floor * epsilon,
    })
}

/// Rounds values within 1e-9 relative of an integer onto it, so ceilings do
/// not pick up binary round-off.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceInflation {
    pub k_eff: f64,
    pub k_inflated: u64,
    pub c_rho: f64,
}

/// Geometric mixing with coefficient rho: c_rho = rho/(1-rho).
pub fn dependence_inflation(k: u64, rho: f64) -> Result<DependenceInflation> {
    if !(rho >= 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho = {rho} must lie in [0, 1)")));
    }
    let c_rho = rho / (1.0 - rho);
    Ok(DependenceInflation {
        k_eff: k as f64 / (1.0 + c_rho),
        k_inflated: ceil_to_k(k as f64 * (1.0 + c_rho), "inflated size")?,
        c_rho,
    })
}

pub fn heavy_tail_bound(
    summary: &SpectralSummary,
    spec: &TargetSpec,
    kappa: f64,
    c_tail: f64,
    polylog_power: u32,
    d: usize,
) -> Result<u64> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid("kappa must be nonnegative"));
    }
    let gap = summary.lambda_min - spec.delta;
    check_gap(gap)?;
    let num = summary.op_norm.powi(2) + spec.sigma.powi(4) + kappa * kappa;
    let x = c_tail * num / (gap * gap) * (d as f64 / spec.xi).ln().powi(polylog_power as i32);
    ceil_to_k(x, "heavy-tail bound")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{spectral_summary, CovarianceMatrix};
    use approx::assert_relative_eq;

    fn summary_of(diag: &[f64]) -> SpectralSummary {
        spectral_summary(&CovarianceMatrix::diagonal(diag).unwrap(), 0.1, 1e-10).unwrap()
    }

    #[test]
    fn constants_default_coupled() {
        let c = BoundConstants::default();
        c.validate().unwrap();
        assert_eq!(c.c_prime, 9.0);
        assert_eq!(c.c_dprime, 144.0);
        let bad = BoundConstants { c2_trunc: 1.0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn target_spec_domain() {
        assert!(TargetSpec::new(0.5, 0.1, 1.0).is_ok());
        assert!(TargetSpec::new(0.5, 1.0, 1.0).is_err());
        assert!(TargetSpec::new(0.0, 0.1, 1.0).is_err());
        assert!(TargetSpec::new(0.5, 0.1, -1.0).is_err());
    }

    #[test]
    fn delta_rescale_paper_factor() {
        assert_eq!(delta_rescale(1, 0.1, 0.9).unwrap(), 81);
        assert_eq!(delta_rescale(37, 0.3, 0.3).unwrap(), 37);
        assert_eq!(delta_rescale(100, 0.5, 0.75).unwrap(), 400);
        assert!(matches!(delta_rescale(1, 0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn drift_examples() {
        let s = summary_of(&[1.0, 1.0]);
        let r = drift_correction(32, 0.1, &s, 0.75, 100.0, 1.0).unwrap();
        assert_eq!(r.k, 48);
        assert_relative_eq!(r.degraded_floor, 0.65, epsilon = 1e-15);
        assert_eq!(drift_correction(32, 0.0, &s, 0.75, 100.0, 1.0).unwrap().k, 32);
    }

    #[test]
    fn dependence_examples() {
        let r = dependence_inflation(32, 0.0).unwrap();
        assert_eq!((r.c_rho, r.k_eff, r.k_inflated), (0.0, 32.0, 32));
        assert_eq!(dependence_inflation(10, 0.5).unwrap().k_inflated, 20);
        let r = dependence_inflation(32, 0.8).unwrap();
        assert_relative_eq!(r.c_rho, 4.0, epsilon = 1e-12);
        assert_eq!(r.k_inflated, 160);
        assert!(dependence_inflation(32, 1.0).is_err());
    }

    #[test]
    fn vacuous_bound_flag() {
        let s = summary_of(&[1.0]);
        let spec = TargetSpec::new(1.0, 0.1, 1.0).unwrap();
        let t = bernstein_terms(&s, &spec, 10, &BoundConstants::default()).unwrap();
        assert!(t.gap_flag);
        assert_eq!(t.delta_gap, 0.0);
        let b = bernstein_failure_bound(10, &t, 1.0);
        assert!(b.vacuous);
        assert_eq!(b.probability, 1.0);
    }
}
