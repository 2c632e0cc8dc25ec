//! Feature matrices, empirical covariance, a Jacobi eigensolver and the
//! spectral statistics every bound is written in terms of.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold below which an eigenvalue is not counted towards rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Default quantile level for `lambda_q`.
pub const DEFAULT_Q: f64 = 0.1;

const SYM_TOL: f64 = 1e-10;
const PSD_SLACK: f64 = 1e-8;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// K x d matrix of features, one demonstration per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Empty("feature matrix has no rows".into()));
        }
        if data.ncols() == 0 {
            return Err(Error::Empty("feature matrix has no columns".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::invalid(format!("non-finite entry at row {r}, column {c}")));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::Empty("no rows".into()));
        }
        let d = rows[0].len();
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::invalid(format!(
                "row {i} has {} columns, expected {d}",
                rows[i].len()
            )));
        }
        Self::new(DMatrix::from_fn(k, d, |i, j| rows[i][j]))
    }

    pub fn k(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.k() {
            return Err(Error::invalid(format!("bad row range {start}..{end} of {}", self.k())));
        }
        Self::new(self.data.rows(start, end - start).into_owned())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.data * c)
    }
}

/// Symmetric d x d matrix together with the number of samples behind it.
/// `k_source == 0` marks an analytic (population) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    m: DMatrix<f64>,
    k_source: u64,
}

impl CovarianceMatrix {
    /// Checks shape, finiteness and symmetry, then symmetrizes exactly.
    /// PSD is checked by [`CovarianceMatrix::check_psd`] or when summarizing.
    pub fn new(m: DMatrix<f64>, k_source: u64) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(Error::Empty("covariance matrix is 0 x 0".into()));
        }
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!("matrix is {} x {}, not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariance matrix has non-finite entries"));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let diff = (m[(i, j)] - m[(j, i)]).abs();
                if diff > SYM_TOL {
                    return Err(Error::Asymmetric { i, j, diff });
                }
            }
        }
        let m = symmetrize(m);
        Ok(Self { m, k_source })
    }

    pub fn population(m: DMatrix<f64>) -> Result<Self> {
        let c = Self::new(m, 0)?;
        c.check_psd()?;
        Ok(c)
    }

    pub fn identity(d: usize) -> Self {
        Self { m: DMatrix::identity(d, d), k_source: 0 }
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("diagonal covariance needs nonnegative entries"));
        }
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values)), 0)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn k_source(&self) -> u64 {
        self.k_source
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.m * c, self.k_source)
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.m[(i, j)] == 0.0))
    }

    pub fn check_psd(&self) -> Result<()> {
        let eig = eigenvalues(&self.m)?;
        let max = eig.first().copied().unwrap_or(0.0).max(0.0);
        let min = eig.last().copied().unwrap_or(0.0);
        if min < -PSD_SLACK * max.max(f64::MIN_POSITIVE) && min < 0.0 {
            return Err(Error::NotPsd { lambda_min: min });
        }
        Ok(())
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Uncentered scatter `H^T H`.
pub fn scatter(features: &FeatureMatrix) -> DMatrix<f64> {
    let h = features.data();
    h.tr_mul(h)
}

/// `(1/K) sum_k phi_k phi_k^T`, optionally after removing the column means.
pub fn empirical_covariance(features: &FeatureMatrix, center: bool) -> Result<CovarianceMatrix> {
    let k = features.k();
    if center && k < 2 {
        return Err(Error::InsufficientData("centering needs at least 2 rows".into()));
    }
    let s = if center {
        let mut h = features.data().clone();
        for mut col in h.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        h.tr_mul(&h)
    } else {
        scatter(features)
    };
    Ok(CovarianceMatrix { m: symmetrize(s / k as f64), k_source: k as u64 })
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetric_eigen(cov: &CovarianceMatrix) -> Result<SymmetricEigen> {
    let (values, vectors) = jacobi(cov.matrix(), true)?;
    Ok(SymmetricEigen { values, vectors: vectors.expect("vectors requested") })
}

/// Eigenvalues of a symmetric matrix, descending. Skips eigenvector accumulation.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(jacobi(m, false)?.0)
}

/// Eigen-decomposition of an arbitrary (already symmetric) matrix.
pub fn eigen_decompose(m: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let (values, vectors) = jacobi(m, true)?;
    Ok(SymmetricEigen { values, vectors: vectors.expect("vectors requested") })
}

/// Cyclic Jacobi. Works on a row-major copy of the upper and lower halves.
fn jacobi(m: &DMatrix<f64>, want_vectors: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::invalid("eigensolver needs a square matrix"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > SYM_TOL * (1.0 + m[(i, j)].abs().max(m[(j, i)].abs())) {
                return Err(Error::Asymmetric { i, j, diff });
            }
        }
    }
    let mut a: Vec<f64> = (0..n * n).map(|idx| {
        let (i, j) = (idx / n, idx % n);
        0.5 * (m[(i, j)] + m[(j, i)])
    }).collect();
    let mut v: Vec<f64> = if want_vectors {
        (0..n * n).map(|idx| if idx / n == idx % n { 1.0 } else { 0.0 }).collect()
    } else {
        Vec::new()
    };
    let norm_f = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    let mut residual = off(&a);
    for _ in 0..=JACOBI_MAX_SWEEPS {
        residual = off(&a);
        if residual <= JACOBI_TOL * norm_f {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if want_vectors {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = want_vectors.then(|| DMatrix::from_fn(n, n, |r, c| v[r * n + order[c]]));
    Ok((values, vectors))
}

/// True when `lambda_min(m) >= floor`. Uses a Cholesky attempt on
/// `m - floor * I`, which is much cheaper than an eigen-decomposition.
pub fn floor_holds(m: &DMatrix<f64>, floor: f64) -> bool {
    if floor <= 0.0 {
        // a covariance matrix is PSD
        return true;
    }
    let mut shifted = m.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= floor;
    }
    nalgebra::Cholesky::new(shifted).is_some()
}

/// Spectral statistics of a PSD matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// Descending; tiny negative round-off is clamped to zero.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    /// Smallest eigenvalue above the rank threshold (0 if there is none).
    pub lambda_r: f64,
    pub op_norm: f64,
    pub trace: f64,
    pub frob_norm: f64,
    pub rank: usize,
    pub r_eff: f64,
    pub r_eff_tr: f64,
    pub lambda_q: f64,
    pub q: f64,
}

impl SpectralSummary {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// The ceil(q*d)-th smallest eigenvalue; q = 0 gives lambda_min.
    pub fn quantile_eigenvalue(&self, q: f64) -> f64 {
        quantile_eigenvalue(&self.eigenvalues, q)
    }
}

fn quantile_eigenvalue(desc: &[f64], q: f64) -> f64 {
    let d = desc.len();
    // the epsilon keeps products like 0.3 * 10 from rounding up a whole index
    let idx = ((q * d as f64) - 1e-9).ceil().max(1.0) as usize;
    let idx = idx.min(d);
    desc[d - idx]
}

pub fn spectral_summary(cov: &CovarianceMatrix, q: f64, rank_tol: f64) -> Result<SpectralSummary> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level q = {q} outside [0, 1]")));
    }
    if !(rank_tol >= 0.0) {
        return Err(Error::invalid(format!("rank_tol = {rank_tol} must be nonnegative")));
    }
    let m = cov.matrix();
    let raw = eigenvalues(m)?;
    let max = raw[0];
    let min = *raw.last().unwrap();
    if min < 0.0 && min < -PSD_SLACK * max.max(0.0) {
        return Err(Error::NotPsd { lambda_min: min });
    }
    let eig: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let d = eig.len();
    let op_norm = eig[0];
    if op_norm <= 0.0 {
        return Err(Error::Degenerate("all eigenvalues are zero".into()));
    }
    let trace = m.trace();
    let frob_norm = m.norm();
    let cut = rank_tol * op_norm;
    let rank = eig.iter().filter(|&&l| l > cut).count();
    let lambda_r = eig.iter().rev().copied().find(|&l| l > cut).unwrap_or(0.0);
    let r_eff = (trace / op_norm).clamp(1.0, d as f64);
    let r_eff_tr = (trace * trace / (frob_norm * frob_norm)).clamp(1.0, d as f64);
    Ok(SpectralSummary {
        lambda_min: eig[d - 1],
        lambda_r,
        op_norm,
        trace,
        frob_norm,
        rank,
        r_eff,
        r_eff_tr,
        lambda_q: quantile_eigenvalue(&eig, q),
        q,
        eigenvalues: eig,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankVariants {
    pub threshold_rank: usize,
    pub energy_rank: usize,
    pub trace_rank: usize,
}

pub fn effective_rank_variants(
    summary: &SpectralSummary,
    energy_level: f64,
    threshold: f64,
) -> Result<RankVariants> {
    if !(energy_level > 0.0 && energy_level <= 1.0) {
        return Err(Error::invalid(format!("energy_level = {energy_level} outside (0, 1]")));
    }
    if !(threshold >= 0.0) {
        return Err(Error::invalid("threshold must be nonnegative"));
    }
    let total: f64 = summary.eigenvalues.iter().sum();
    if summary.op_norm <= 0.0 || total <= 0.0 {
        return Err(Error::Degenerate("all eigenvalues are zero".into()));
    }
    let threshold_rank = summary
        .eigenvalues
        .iter()
        .filter(|&&l| l > threshold * summary.op_norm)
        .count();
    let target = energy_level * total;
    let mut acc = 0.0;
    let mut energy_rank = summary.dim();
    for (i, l) in summary.eigenvalues.iter().enumerate() {
        acc += l;
        // relative slack so that e.g. 2 of 4 equal eigenvalues reach exactly 50%
        if acc >= target * (1.0 - 1e-12) {
            energy_rank = i + 1;
            break;
        }
    }
    let trace_rank = (summary.r_eff_tr - 1e-9).ceil().max(1.0) as usize;
    Ok(RankVariants { threshold_rank, energy_rank, trace_rank })
}
