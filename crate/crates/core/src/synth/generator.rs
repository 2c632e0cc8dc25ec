use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, Rng};
use crate::spectral::{eigen_decompose, CovarianceMatrix, FeatureMatrix};

/// How the drift perturbation is oriented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Fixed offset `eps * u_{t mod d}` with `u_i` the eigenvectors of Sigma.
    #[default]
    Cycling,
    /// Shrinks every row towards the origin by `eps`: `phi - eps * phi/|phi|`.
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    Gaussian,
    Sphere,
    Rademacher,
    /// `nu = inf` reproduces the Gaussian stream exactly.
    StudentT { nu: f64 },
    Drifted {
        epsilon: f64,
        #[serde(default)]
        mode: DriftMode,
        /// Linear ramp: row t gets `eps * min(1, (t+1)/ramp)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ramp: Option<u64>,
    },
    Ar1 { rho: f64 },
}

impl GeneratorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GeneratorKind::StudentT { nu } if !(nu > 2.0) => Err(Error::Domain(format!(
                "student-t with nu = {nu} has no covariance (need nu > 2)"
            ))),
            GeneratorKind::Drifted { epsilon, ramp, .. } => {
                if !(epsilon >= 0.0 && epsilon.is_finite()) {
                    return Err(Error::invalid(format!("drift epsilon = {epsilon} must be >= 0")));
                }
                if ramp == Some(0) {
                    return Err(Error::invalid("drift ramp must be at least 1"));
                }
                Ok(())
            }
            GeneratorKind::Ar1 { rho } if !(0.0..1.0).contains(&rho) => {
                Err(Error::Domain(format!("AR(1) rho = {rho} must lie in [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// True when rows are exactly N(0, Sigma) and independent.
    pub fn is_gaussian(&self) -> bool {
        match *self {
            GeneratorKind::Gaussian => true,
            GeneratorKind::StudentT { nu } => nu.is_infinite(),
            GeneratorKind::Drifted { epsilon, .. } => epsilon == 0.0,
            GeneratorKind::Ar1 { rho } => rho == 0.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub sigma: CovarianceMatrix,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(kind: GeneratorKind, sigma: CovarianceMatrix, seed: u64) -> Result<Self> {
        kind.validate()?;
        sigma.check_psd()?;
        Ok(Self { kind, sigma, seed })
    }

    pub fn gaussian(sigma: CovarianceMatrix, seed: u64) -> Result<Self> {
        Self::new(GeneratorKind::Gaussian, sigma, seed)
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_kind(&self, kind: GeneratorKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, ..self.clone() })
    }
}

/// Symmetric square root of Sigma plus its eigenvectors.
#[derive(Debug, Clone)]
pub struct PopulationRoot {
    /// `None` when Sigma is diagonal; then `diag` holds the root.
    root: Option<DMatrix<f64>>,
    diag: Vec<f64>,
    eigvecs: DMatrix<f64>,
}

impl PopulationRoot {
    pub fn new(sigma: &CovarianceMatrix) -> Result<Self> {
        let d = sigma.dim();
        if sigma.is_diagonal() {
            let m = sigma.matrix();
            let diag = (0..d).map(|i| m[(i, i)].max(0.0).sqrt()).collect();
            // eigenvectors of a diagonal matrix, ordered by decreasing variance
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| m[(b, b)].total_cmp(&m[(a, a)]).then(a.cmp(&b)));
            let eigvecs = DMatrix::from_fn(d, d, |r, c| if r == order[c] { 1.0 } else { 0.0 });
            return Ok(Self { root: None, diag, eigvecs });
        }
        let e = eigen_decompose(sigma.matrix())?;
        let sq = DVector::from_iterator(d, e.values.iter().map(|v| v.max(0.0).sqrt()));
        let root = &e.vectors * DMatrix::from_diagonal(&sq) * e.vectors.transpose();
        let root = (&root + root.transpose()) * 0.5;
        Ok(Self { root: Some(root), diag: Vec::new(), eigvecs: e.vectors })
    }

    /// Maps each row z to `Sigma^{1/2} z`.
    pub fn apply_rows(&self, z: DMatrix<f64>) -> DMatrix<f64> {
        match &self.root {
            Some(r) => z * r,
            None => {
                let mut z = z;
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    col *= self.diag[j];
                }
                z
            }
        }
    }

    /// `Sigma^{1/2} W Sigma^{1/2}`.
    pub fn conjugate(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.root {
            Some(r) => r * w * r,
            None => DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| self.diag[i] * w[(i, j)] * self.diag[j]),
        }
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }
}

/// Scatter matrix `sum_k x_k x_k^T` of k iid N(0, Sigma) rows, drawn through
/// the Bartlett decomposition of the Wishart law. Cost is O(d^3) whatever k is.
pub fn gaussian_scatter(root: &PopulationRoot, d: usize, k: u64, rng: &mut Rng) -> Result<DMatrix<f64>> {
    if k < d as u64 {
        return Err(Error::invalid(format!("Bartlett sampling needs k >= d ({k} < {d})")));
    }
    let mut l = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let dof = (k - i as u64) as f64;
        let chi = ChiSquared::new(dof).map_err(|e| Error::invalid(e.to_string()))?;
        l[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            l[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let w = &l * l.transpose();
    let s = root.conjugate(&w);
    Ok((&s + s.transpose()) * 0.5)
}

/// Source of feature rows, consumed in order without reuse.
pub trait SampleSource {
    fn dim(&self) -> usize;
    /// Next `k` rows.
    fn draw(&mut self, k: usize) -> Result<FeatureMatrix>;
    fn rows_drawn(&self) -> u64;
}

/// Endless row stream of a generator. `generate(config, k)` is the first k rows.
#[derive(Debug, Clone)]
pub struct FeatureStream {
    config: GeneratorConfig,
    root: PopulationRoot,
    main: Rng,
    aux: Rng,
    t: u64,
    prev: Option<DVector<f64>>,
}

impl FeatureStream {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.kind.validate()?;
        Ok(Self {
            root: PopulationRoot::new(&config.sigma)?,
            main: rng_for(config.seed, "rows", 0),
            aux: rng_for(config.seed, "rows-aux", 0),
            t: 0,
            prev: None,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn next_block(&mut self, k: usize) -> DMatrix<f64> {
        let d = self.config.dim();
        let mut z = DMatrix::<f64>::zeros(k, d);
        // fill row by row so the stream does not depend on the block size
        match self.config.kind {
            GeneratorKind::Rademacher => {
                for i in 0..k {
                    for j in 0..d {
                        z[(i, j)] = if self.main.random::<bool>() { 1.0 } else { -1.0 };
                    }
                }
            }
            _ => {
                for i in 0..k {
                    for j in 0..d {
                        z[(i, j)] = StandardNormal.sample(&mut self.main);
                    }
                }
            }
        }
        match self.config.kind {
            GeneratorKind::Sphere => {
                let r = (d as f64).sqrt();
                for mut row in z.row_iter_mut() {
                    let n = row.norm();
                    if n > 0.0 {
                        row *= r / n;
                    }
                }
            }
            GeneratorKind::StudentT { nu } if nu.is_finite() => {
                let chi = ChiSquared::new(nu).expect("validated dof");
                for mut row in z.row_iter_mut() {
                    let w: f64 = chi.sample(&mut self.aux);
                    row *= ((nu - 2.0) / w).sqrt();
                }
            }
            _ => {}
        }
        let mut x = self.root.apply_rows(z);
        match self.config.kind {
            GeneratorKind::Drifted { epsilon, mode, ramp } if epsilon > 0.0 => {
                for i in 0..k {
                    let t = self.t + i as u64;
                    let eps = match ramp {
                        Some(r) => epsilon * ((t + 1) as f64 / r as f64).min(1.0),
                        None => epsilon,
                    };
                    let mut row = x.row_mut(i);
                    match mode {
                        DriftMode::Cycling => {
                            let u = self.root.eigvecs().column((t % d as u64) as usize);
                            row += u.transpose() * eps;
                        }
                        DriftMode::Radial => {
                            let n = row.norm();
                            if n > 0.0 {
                                row *= 1.0 - eps / n;
                            }
                        }
                    }
                }
            }
            GeneratorKind::Ar1 { rho } if rho > 0.0 => {
                let a = (1.0 - rho * rho).sqrt();
                for i in 0..k {
                    let fresh = x.row(i).transpose();
                    let next = match &self.prev {
                        Some(p) => p * rho + fresh * a,
                        None => fresh,
                    };
                    x.set_row(i, &next.transpose());
                    self.prev = Some(next);
                }
            }
            _ => {}
        }
        self.t += k as u64;
        x
    }
}

impl SampleSource for FeatureStream {
    fn dim(&self) -> usize {
        self.config.dim()
    }

    fn draw(&mut self, k: usize) -> Result<FeatureMatrix> {
        if k == 0 {
            return Err(Error::invalid("cannot draw 0 rows"));
        }
        FeatureMatrix::new(self.next_block(k))
    }

    fn rows_drawn(&self) -> u64 {
        self.t
    }
}

/// Rows of a fixed matrix, handed out in order.
#[derive(Debug, Clone)]
pub struct MatrixSource {
    features: FeatureMatrix,
    cursor: usize,
}

impl MatrixSource {
    pub fn new(features: FeatureMatrix) -> Self {
        Self { features, cursor: 0 }
    }
}

impl SampleSource for MatrixSource {
    fn dim(&self) -> usize {
        self.features.d()
    }

    fn draw(&mut self, k: usize) -> Result<FeatureMatrix> {
        let left = self.features.k() - self.cursor;
        if k == 0 || k > left {
            return Err(Error::Exhausted { requested: k, available: left });
        }
        let out = self.features.slice_rows(self.cursor, self.cursor + k)?;
        self.cursor += k;
        Ok(out)
    }

    fn rows_drawn(&self) -> u64 {
        self.cursor as u64
    }
}

/// First `k` rows of the generator's stream.
pub fn generate(config: &GeneratorConfig, k: usize) -> Result<FeatureMatrix> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    FeatureStream::new(config)?.draw(k)
}

/// Scatter matrix of k fresh rows from an independent stream `index` of
/// `config`. Gaussian kinds with k >= d use the Wishart shortcut.
pub fn sample_scatter(config: &GeneratorConfig, root: &PopulationRoot, k: u64, label: &str, index: u64) -> Result<DMatrix<f64>> {
    let d = config.dim();
    if config.kind.is_gaussian() && k >= d as u64 {
        let mut rng = rng_for(config.seed, label, index);
        return gaussian_scatter(root, d, k, &mut rng);
    }
    let mut stream = FeatureStream::new(&config.with_seed(derive_seed(config.seed, label, index)))?;
    let mut s = DMatrix::<f64>::zeros(d, d);
    let mut left = k as usize;
    const BLOCK: usize = 4096;
    while left > 0 {
        let b = left.min(BLOCK);
        let h = stream.next_block(b);
        s += h.tr_mul(&h);
        left -= b;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_size_does_not_change_stream() {
        let cfg = GeneratorConfig::new(
            GeneratorKind::Ar1 { rho: 0.4 },
            CovarianceMatrix::diagonal(&[1.0, 2.0, 0.5]).unwrap(),
            5,
        )
        .unwrap();
        let whole = generate(&cfg, 10).unwrap();
        let mut s = FeatureStream::new(&cfg).unwrap();
        let a = s.draw(3).unwrap();
        let b = s.draw(7).unwrap();
        assert_eq!(whole.slice_rows(0, 3).unwrap(), a);
        assert_eq!(whole.slice_rows(3, 10).unwrap(), b);
        assert_eq!(s.rows_drawn(), 10);
    }

    #[test]
    fn bad_parameters() {
        let s = CovarianceMatrix::identity(2);
        assert!(matches!(
            GeneratorConfig::new(GeneratorKind::StudentT { nu: 2.0 }, s.clone(), 1),
            Err(Error::Domain(_))
        ));
        assert!(GeneratorConfig::new(GeneratorKind::Ar1 { rho: 1.0 }, s.clone(), 1).is_err());
        let not_psd = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 0).unwrap();
        assert!(matches!(GeneratorConfig::gaussian(not_psd, 1), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn matrix_source_runs_out() {
        let f = FeatureMatrix::new(DMatrix::from_element(5, 2, 1.0)).unwrap();
        let mut src = MatrixSource::new(f);
        assert_eq!(src.draw(3).unwrap().k(), 3);
        assert!(matches!(src.draw(3), Err(Error::Exhausted { requested: 3, available: 2 })));
    }

    #[test]
    fn drift_offset_has_norm_epsilon() {
        let base = GeneratorConfig::gaussian(CovarianceMatrix::identity(4), 9).unwrap();
        let drifted = base
            .with_kind(GeneratorKind::Drifted { epsilon: 0.3, mode: DriftMode::Cycling, ramp: None })
            .unwrap();
        let a = generate(&base, 8).unwrap();
        let b = generate(&drifted, 8).unwrap();
        for i in 0..8 {
            let diff = (b.data().row(i) - a.data().row(i)).norm();
            assert!((diff - 0.3).abs() < 1e-12);
        }
        let radial = base
            .with_kind(GeneratorKind::Drifted { epsilon: 0.3, mode: DriftMode::Radial, ramp: None })
            .unwrap();
        let c = generate(&radial, 8).unwrap();
        for i in 0..8 {
            let shrink = a.data().row(i).norm() - c.data().row(i).norm();
            assert!((shrink - 0.3).abs() < 1e-12);
        }
    }
}
