//! Knee of a performance-vs-K curve: the split minimizing the total squared
//! error of two independent least-squares lines, plus a bootstrap interval.
//!
//! Split `s` fits one line to `points[0..=s]` and another to `points[s..]`,
//! so the break point belongs to both segments and the knee is `k[s]`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const DEFAULT_RESAMPLES: usize = 200;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceCurve {
    points: Vec<CurvePoint>,
    replicates: Option<Vec<Vec<f64>>>,
}

impl PerformanceCurve {
    pub fn new(points: Vec<CurvePoint>, replicates: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InsufficientData(format!(
                "a curve needs at least 4 points, got {}",
                points.len()
            )));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].k <= w[0].k {
                return Err(Error::invalid(format!(
                    "k values must be strictly increasing (point {} has k = {} after {})",
                    i + 1,
                    w[1].k,
                    w[0].k
                )));
            }
        }
        if let Some(i) = points.iter().position(|p| !p.score.is_finite()) {
            return Err(Error::invalid(format!("score at point {i} is not finite")));
        }
        if let Some(reps) = &replicates {
            if reps.len() != points.len() {
                return Err(Error::invalid("one replicate list per point is required"));
            }
            if reps.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("replicate scores must be finite"));
            }
        }
        Ok(Self { points, replicates })
    }

    /// Curve whose scores are the replicate means.
    pub fn from_replicates(ks: &[u64], replicates: Vec<Vec<f64>>) -> Result<Self> {
        if ks.len() != replicates.len() {
            return Err(Error::invalid("one replicate list per k is required"));
        }
        if let Some(i) = replicates.iter().position(|r| r.is_empty()) {
            return Err(Error::invalid(format!("no replicates at point {i}")));
        }
        let points = ks
            .iter()
            .zip(&replicates)
            .map(|(&k, r)| CurvePoint { k, score: r.iter().sum::<f64>() / r.len() as f64 })
            .collect();
        Self::new(points, Some(replicates))
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn replicates(&self) -> Option<&[Vec<f64>]> {
        self.replicates.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ks(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub sse: f64,
    pub left_slope: f64,
    pub left_intercept: f64,
    pub right_slope: f64,
    pub right_intercept: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeEstimate {
    pub k_knee: u64,
    pub split_index: usize,
    pub sse: f64,
    pub ci_low: u64,
    pub ci_high: u64,
    pub bootstrap_count: usize,
}

/// OLS line through (x, y); returns (slope, intercept, sse). Works on
/// centered values so large offsets in x or y do not cancel.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let r = (b - my) - slope * (a - mx);
            r * r
        })
        .sum();
    (slope, my - slope * mx, sse)
}

fn fit_xy(x: &[f64], y: &[f64], split: usize) -> Result<SegmentFit> {
    let n = x.len();
    if split < 2 || split + 2 > n {
        return Err(Error::Domain(format!(
            "split index {split} is not admissible for {n} points (need 2 <= s <= n - 2)"
        )));
    }
    let (ls, li, le) = ols(&x[..=split], &y[..=split]);
    let (rs, ri, re) = ols(&x[split..], &y[split..]);
    Ok(SegmentFit { sse: le + re, left_slope: ls, left_intercept: li, right_slope: rs, right_intercept: ri })
}

pub fn piecewise_fit(curve: &PerformanceCurve, split_index: usize) -> Result<SegmentFit> {
    let x: Vec<f64> = curve.points.iter().map(|p| p.k as f64).collect();
    fit_xy(&x, &curve.scores(), split_index)
}

/// Relative slack under which two SSE values count as a tie.
const TIE_TOL: f64 = 1e-10;

fn argmin_split(x: &[f64], y: &[f64]) -> (usize, f64) {
    let n = y.len();
    let my = y.iter().sum::<f64>() / n as f64;
    let total: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let tol = TIE_TOL * total + f64::MIN_POSITIVE;
    let mut best = (2, f64::INFINITY);
    for s in 2..=n - 2 {
        let sse = fit_xy(x, y, s).expect("admissible split").sse;
        if sse < best.1 - tol {
            best = (s, sse);
        }
    }
    best
}

pub fn knee_point(curve: &PerformanceCurve) -> Result<KneeEstimate> {
    if curve.len() < 4 {
        return Err(Error::InsufficientData("knee detection needs at least 4 points".into()));
    }
    let x: Vec<f64> = curve.points.iter().map(|p| p.k as f64).collect();
    let (s, sse) = argmin_split(&x, &curve.scores());
    let k = curve.points[s].k;
    Ok(KneeEstimate { k_knee: k, split_index: s, sse, ci_low: k, ci_high: k, bootstrap_count: 0 })
}

/// Knee with a percentile bootstrap interval. With replicates, scores are
/// resampled within each k; without them, residuals of the best two-segment
/// fit are resampled instead.
pub fn bootstrap_knee(
    curve: &PerformanceCurve,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<KneeEstimate> {
    if resamples == 0 {
        return Err(Error::invalid("resamples must be at least 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level = {level} must lie in (0, 1)")));
    }
    let point = knee_point(curve)?;
    let x: Vec<f64> = curve.points.iter().map(|p| p.k as f64).collect();
    let n = curve.len();

    let splits: Vec<usize> = match &curve.replicates {
        Some(reps) => {
            if let Some(i) = reps.iter().position(|r| r.len() < 2) {
                return Err(Error::invalid(format!(
                    "bootstrap needs at least 2 replicates per k; point {i} has {}",
                    reps[i].len()
                )));
            }
            (0..resamples)
                .into_par_iter()
                .map(|b| {
                    let mut rng = rng_for(seed, "bootstrap", b as u64);
                    let y: Vec<f64> = reps
                        .iter()
                        .map(|r| {
                            let m = r.len();
                            (0..m).map(|_| r[rng.random_range(0..m)]).sum::<f64>() / m as f64
                        })
                        .collect();
                    argmin_split(&x, &y).0
                })
                .collect()
        }
        None => {
            let fit = fit_xy(&x, &curve.scores(), point.split_index)?;
            let s = point.split_index;
            let fitted: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(i, &xi)| {
                    if i <= s {
                        fit.left_slope * xi + fit.left_intercept
                    } else {
                        fit.right_slope * xi + fit.right_intercept
                    }
                })
                .collect();
            let resid: Vec<f64> = curve.scores().iter().zip(&fitted).map(|(y, f)| y - f).collect();
            (0..resamples)
                .into_par_iter()
                .map(|b| {
                    let mut rng = rng_for(seed, "bootstrap-residual", b as u64);
                    let y: Vec<f64> =
                        fitted.iter().map(|f| f + resid[rng.random_range(0..n)]).collect();
                    argmin_split(&x, &y).0
                })
                .collect()
        }
    };

    let mut knees: Vec<u64> = splits.iter().map(|&s| curve.points[s].k).collect();
    knees.sort_unstable();
    let alpha = 1.0 - level;
    let b = knees.len() as f64;
    let lo_idx = ((b * alpha / 2.0).ceil() as usize).clamp(1, knees.len()) - 1;
    let hi_idx = ((b * (1.0 - alpha / 2.0)).ceil() as usize).clamp(1, knees.len()) - 1;
    Ok(KneeEstimate {
        // the point estimate always sits inside the reported interval
        ci_low: knees[lo_idx].min(point.k_knee),
        ci_high: knees[hi_idx].max(point.k_knee),
        bootstrap_count: resamples,
        ..point
    })
}

/// `k_theory / k_knee`.
pub fn error_ratio(k_theory: u64, knee: &KneeEstimate) -> Result<f64> {
    if knee.k_knee == 0 {
        return Err(Error::invalid("knee must be at least 1"));
    }
    Ok(k_theory as f64 / knee.k_knee as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(ks: &[u64], ys: &[f64]) -> PerformanceCurve {
        let pts = ks.iter().zip(ys).map(|(&k, &score)| CurvePoint { k, score }).collect();
        PerformanceCurve::new(pts, None).unwrap()
    }

    #[test]
    fn exact_bilinear() {
        let ks: Vec<u64> = (0..10).collect();
        let ys: Vec<f64> = ks.iter().map(|&k| (k as f64).min(3.0)).collect();
        let c = curve(&ks, &ys);
        assert!(piecewise_fit(&c, 3).unwrap().sse < 1e-24);
        assert_eq!(knee_point(&c).unwrap().split_index, 3);
    }

    #[test]
    fn break_at_32() {
        let ks: Vec<u64> = (1..=16).map(|i| 4 * i).collect();
        let ys: Vec<f64> = ks.iter().map(|&k| (k as f64).min(32.0)).collect();
        assert_eq!(knee_point(&curve(&ks, &ys)).unwrap().k_knee, 32);
    }

    #[test]
    fn linear_curve_takes_leftmost_split() {
        let ks: Vec<u64> = (1..=12).collect();
        let ys: Vec<f64> = ks.iter().map(|&k| 0.3 * k as f64 + 1.0).collect();
        let c = curve(&ks, &ys);
        for s in 2..=10 {
            assert!(piecewise_fit(&c, s).unwrap().sse < 1e-20);
        }
        assert_eq!(knee_point(&c).unwrap().split_index, 2);
    }

    #[test]
    fn inadmissible_split() {
        let c = curve(&[1, 2, 3, 4, 5], &[0.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(matches!(piecewise_fit(&c, 1), Err(Error::Domain(_))));
        assert!(matches!(piecewise_fit(&c, 4), Err(Error::Domain(_))));
        assert!(PerformanceCurve::new(vec![CurvePoint { k: 1, score: 0.0 }; 3], None).is_err());
    }

    #[test]
    fn zero_variance_bootstrap_collapses() {
        let ks: Vec<u64> = (1..=10).map(|i| 8 * i).collect();
        let reps: Vec<Vec<f64>> = ks.iter().map(|&k| vec![(k as f64).min(40.0); 5]).collect();
        let c = PerformanceCurve::from_replicates(&ks, reps).unwrap();
        let e = bootstrap_knee(&c, 50, 0.95, 3).unwrap();
        assert_eq!((e.ci_low, e.ci_high), (e.k_knee, e.k_knee));
        assert_eq!(e.k_knee, 40);
    }

    #[test]
    fn short_replicates_rejected() {
        let ks: Vec<u64> = (1..=6).collect();
        let mut reps: Vec<Vec<f64>> = ks.iter().map(|&k| vec![k as f64, k as f64]).collect();
        reps[2] = vec![3.0];
        let c = PerformanceCurve::from_replicates(&ks, reps).unwrap();
        assert!(matches!(bootstrap_knee(&c, 10, 0.95, 1), Err(Error::Invalid(_))));
    }

    #[test]
    fn ratio_arithmetic() {
        let k = KneeEstimate { k_knee: 30, split_index: 2, sse: 0.0, ci_low: 30, ci_high: 30, bootstrap_count: 0 };
        assert!((error_ratio(48, &k).unwrap() - 1.6).abs() < 1e-15);
        let k = KneeEstimate { k_knee: 12, ..k };
        assert!((error_ratio(41, &k).unwrap() - 3.4166666666666665).abs() < 1e-15);
    }
}
