//! Small dense-matrix helpers shared across the filters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        what: what.to_string(),
    })
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Clip the eigenvalues of a symmetric matrix from below, returning the clipped
/// matrix and how many eigenvalues were raised.
pub fn eigen_clip(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut clipped = 0;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            clipped += 1;
            floor
        } else {
            v
        }
    });
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (symmetrize(&out), clipped)
}

/// Factorized SPD covariance with the quantities density evaluation needs.
#[derive(Debug, Clone)]
pub struct DenseGaussian {
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl DenseGaussian {
    pub fn new(cov: DMatrix<f64>, what: &str) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::Validation(format!("{what} must be square")));
        }
        if (&cov - cov.transpose()).iter().any(|v| v.abs() > 1e-9 * (1.0 + max_abs(&cov))) {
            return Err(Error::Validation(format!("{what} must be symmetric")));
        }
        let chol = cholesky(&cov, what)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let precision = symmetrize(&chol.inverse());
        let log_norm = -0.5 * (cov.nrows() as f64 * LN_2PI + log_det);
        Ok(Self {
            cov,
            chol,
            precision,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Lower Cholesky factor `L` with `cov = L L^T`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `cov^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `L^{-1} v`, the whitened residual.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(m)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    /// Log-density of a zero-mean Gaussian evaluated at `residual`.
    pub fn log_density(&self, residual: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * self.whiten(residual).norm_squared()
    }
}

/// Gaussian noise law; a zero covariance is allowed and means "no noise".
#[derive(Debug, Clone)]
pub enum Noise {
    Zero(usize),
    Dense(DenseGaussian),
}

impl Noise {
    pub fn new(cov: DMatrix<f64>, what: &str) -> Result<Self> {
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{what} must be finite")));
        }
        if cov.is_square() && cov.iter().all(|v| *v == 0.0) {
            Ok(Noise::Zero(cov.nrows()))
        } else {
            Ok(Noise::Dense(DenseGaussian::new(cov, what)?))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Noise::Zero(n) => *n,
            Noise::Dense(g) => g.dim(),
        }
    }

    pub fn cov(&self) -> DMatrix<f64> {
        match self {
            Noise::Zero(n) => DMatrix::zeros(*n, *n),
            Noise::Dense(g) => g.cov().clone(),
        }
    }

    /// The factorized law, or an error if densities are requested of a zero covariance.
    pub fn dense(&self, what: &str) -> Result<&DenseGaussian> {
        match self {
            Noise::Zero(_) => Err(Error::NotPositiveDefinite {
                what: format!("{what} (zero covariance has no density)"),
            }),
            Noise::Dense(g) => Ok(g),
        }
    }

    /// One draw `L z`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Noise::Zero(n) => DVector::zeros(*n),
            Noise::Dense(g) => {
                let z = DVector::from_fn(g.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                g.chol.l_dirty().lower_triangle() * z
            }
        }
    }

    /// `n` independent draws as the columns of a `dim x n` matrix.
    pub fn sample_columns<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        match self {
            Noise::Zero(d) => DMatrix::zeros(*d, n),
            Noise::Dense(g) => {
                let z = DMatrix::from_fn(g.dim(), n, |_, _| rng.sample::<f64, _>(StandardNormal));
                g.chol.l_dirty().lower_triangle() * z
            }
        }
    }
}

/// `log(sum(exp(v)))` without overflow; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
