//! Covariance matrices for occupancy-count vectors.
//!
//! The asymptotic factorial moments have the form
//! `mu^k exp(1/2 (k/mu)' (Sigma - diag(mu)) (k/mu))`. Reading `Sigma` off the
//! quadratic exponent gives, with `d_i = m_i - n/N`,
//!
//! ```text
//! sigma_ii = 2 mu_i^2 K_ii + mu_i,  K_ii = -d_i^2 / (2 N var W) - 1/(2N)
//! sigma_ij = mu_i mu_j K_ij,        K_ij = -d_i d_j / (N var W) - 1/N
//! ```
//!
//! For the top levels `C-1, C-2, ...` this matrix is nearly singular and its
//! eigenvalues separate by powers of `lambda`; the closed forms below give the
//! leading eigenstructure for the pairs and triples treated explicitly.

use serde::Serialize;

use crate::linalg::{jacobi_eigen, spectral_function, Matrix};
use crate::moments::{validate_levels, MomentOrder, OccupancyProfile};
use crate::tilted::TiltSolution;
use crate::{Error, Result};

pub const MAX_DIMENSION: usize = 64;

/// A symmetric positive-definite `Sigma` with eigenpairs and principal roots.
#[derive(Debug, Clone, Serialize)]
pub struct CovModel {
    pub sigma: Matrix,
    /// Decreasing.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: Matrix,
    pub sqrt: Matrix,
    pub invsqrt: Matrix,
}

impl CovModel {
    pub fn new(sigma: Matrix) -> Result<Self> {
        let r = sigma.dim();
        if r == 0 || r > MAX_DIMENSION {
            return Err(Error::InvalidParams(format!(
                "covariance dimension must be in 1..={MAX_DIMENSION}, got {r}"
            )));
        }
        if sigma.asymmetry() > 1e-10 {
            return Err(Error::InvalidParams(format!(
                "matrix is not symmetric (relative asymmetry {:e})",
                sigma.asymmetry()
            )));
        }
        let eigen = jacobi_eigen(&sigma);
        let smallest = *eigen.values.last().expect("non-empty");
        // numerically singular counts as not positive definite
        if !(smallest > 1e-13 * eigen.values[0].abs()) {
            return Err(Error::NotPositiveDefinite {
                eigenvalue: smallest,
            });
        }
        let sqrt = spectral_function(&eigen, f64::sqrt);
        let invsqrt = spectral_function(&eigen, |x| 1.0 / x.sqrt());
        Ok(Self {
            sigma,
            eigenvalues: eigen.values,
            eigenvectors: eigen.vectors,
            sqrt,
            invsqrt,
        })
    }

    pub fn r(&self) -> usize {
        self.sigma.dim()
    }

    /// `||S S - Sigma||_inf / ||Sigma||_inf`.
    pub fn sqrt_residual(&self) -> f64 {
        self.sqrt.mul(&self.sqrt).sub(&self.sigma).norm_inf() / self.sigma.norm_inf()
    }

    /// `||S^-1 Sigma S^-1 - I||_inf`.
    pub fn whitening_residual(&self) -> f64 {
        self.invsqrt
            .mul(&self.sigma)
            .mul(&self.invsqrt)
            .sub(&Matrix::identity(self.r()))
            .norm_inf()
    }

    /// `||V'V - I||_inf`.
    pub fn orthonormality_residual(&self) -> f64 {
        self.eigenvectors
            .transpose()
            .mul(&self.eigenvectors)
            .sub(&Matrix::identity(self.r()))
            .norm_inf()
    }
}

/// Symmetric principal square root and its inverse.
pub fn sym_sqrt(matrix: &Matrix) -> Result<CovModel> {
    CovModel::new(matrix.clone())
}

/// `Sigma` read off the asymptotic moment exponent, with
/// `mu_i = N lambda^{m_i} / (g m_i!)`.
pub fn sigma_matrix(m: &[u32], tilt: &TiltSolution) -> Result<(Vec<f64>, Matrix)> {
    validate_levels(m, tilt.capacity())?;
    let profile = OccupancyProfile::asymptotic(m, tilt)?;
    let mu = profile.mu;
    let bins = tilt.bins as f64;
    let n_var = tilt.n_var();
    let drift: Vec<f64> = m.iter().map(|&mi| f64::from(mi) - tilt.load).collect();
    let r = m.len();
    let mut sigma = Matrix::zeros(r);
    for i in 0..r {
        for j in 0..r {
            let k = -drift[i] * drift[j] / n_var - 1.0 / bins;
            sigma[(i, j)] = mu[i] * mu[j] * k;
        }
        sigma[(i, i)] += mu[i];
    }
    Ok((mu, sigma))
}

/// Builds and decomposes `Sigma`; fails with the offending eigenvalue when
/// the parameters leave the positive-definite regime.
pub fn build_sigma(m: &[u32], tilt: &TiltSolution) -> Result<CovModel> {
    let (_, sigma) = sigma_matrix(m, tilt)?;
    CovModel::new(sigma)
}

/// `-(sum k_i d_i)^2 / (2 N var W) - (sum k_i)^2 / (2N)`.
pub fn lemma_exponent(m: &[u32], tilt: &TiltSolution, order: &MomentOrder) -> f64 {
    let drift: f64 = order
        .k
        .iter()
        .zip(m)
        .map(|(&k, &mi)| f64::from(k) * (f64::from(mi) - tilt.load))
        .sum();
    let s = order.total() as f64;
    -drift * drift / (2.0 * tilt.n_var()) - s * s / (2.0 * tilt.bins as f64)
}

/// `1/2 (k/mu)' (Sigma - diag mu) (k/mu)`.
pub fn sigma_exponent(sigma: &Matrix, mu: &[f64], order: &MomentOrder) -> f64 {
    let x: Vec<f64> = order.k.iter().zip(mu).map(|(&k, &m)| f64::from(k) / m).collect();
    let sx = sigma.mul_vec(&x);
    let quad: f64 = x.iter().zip(&sx).map(|(a, b)| a * b).sum();
    let diag: f64 = x.iter().zip(mu).map(|(a, m)| a * a * m).sum();
    0.5 * (quad - diag)
}

fn falling(c: u32, k: u32) -> f64 {
    (0..k).map(|i| f64::from(c) - f64::from(i)).product()
}

/// Leading eigenstructure of `Sigma` for `m = (C-1, C-2)`.
#[derive(Debug, Clone, Serialize)]
pub struct ClosedForm12 {
    pub capacity: u32,
    pub bins: f64,
    pub lambda: f64,
    /// `5 [C]_2 N / lambda^2`.
    pub nu1: f64,
    /// `9 [C]_3 N / (5 lambda^3)`.
    pub nu2: f64,
    pub e1: [f64; 2],
    pub e2: [f64; 2],
    /// `([C]_2 N / lambda^2) A_{1,2}` with the `1/lambda` corrections.
    pub sigma: Matrix,
    /// `nu1^{-1/2} e1 e1' + nu2^{-1/2} e2 e2'`.
    pub invsqrt: Matrix,
    /// Non-degenerate standardizing matrix including the `lambda^{-1/2}` terms.
    pub a_n: Matrix,
}

pub fn closed_form_sigma12(capacity: u32, bins: f64, lambda: f64) -> Result<ClosedForm12> {
    if capacity < 3 {
        return Err(Error::InvalidParams(format!(
            "pair (C-1, C-2) closed form needs C >= 3, got {capacity}"
        )));
    }
    if lambda < 10.0 {
        return Err(Error::InvalidParams(format!(
            "closed forms need lambda >= 10, got {lambda}"
        )));
    }
    let c = f64::from(capacity);
    let c2 = falling(capacity, 2);
    let c3 = falling(capacity, 3);
    let nu1 = 5.0 * c2 * bins / (lambda * lambda);
    let nu2 = 9.0 * c3 * bins / (5.0 * lambda.powi(3));
    let root5 = 5f64.sqrt();
    let e1 = [2.0 / root5, -1.0 / root5];
    let e2 = [1.0 / root5, 2.0 / root5];

    let scale = c2 * bins / (lambda * lambda);
    let a11 = 4.0 - (11.0 * c + 2.0) / lambda;
    let a12 = -2.0 + (10.0 * c - 8.0) / lambda;
    let a22 = 1.0 - (5.0 * c - 4.0) / lambda;
    let sigma = Matrix::from_rows(&[vec![a11, a12], vec![a12, a22]]).scale(scale);

    let (w1, w2) = (nu1.powf(-0.5), nu2.powf(-0.5));
    let mut invsqrt = Matrix::zeros(2);
    for i in 0..2 {
        for j in 0..2 {
            invsqrt[(i, j)] = w1 * e1[i] * e1[j] + w2 * e2[i] * e2[j];
        }
    }

    let u = (c - 2.0).sqrt() / (5.0 * lambda.sqrt());
    let prefactor = lambda.powf(1.5) / (3.0 * (5.0 * c3 * bins).sqrt());
    let a_n = Matrix::from_rows(&[
        vec![1.0 + 12.0 * u, 2.0 - 6.0 * u],
        vec![2.0 - 6.0 * u, 4.0 + 3.0 * u],
    ])
    .scale(prefactor);

    Ok(ClosedForm12 {
        capacity,
        bins,
        lambda,
        nu1,
        nu2,
        e1,
        e2,
        sigma,
        invsqrt,
        a_n,
    })
}

/// Leading eigenvalues of `Sigma` for `m = (C-1, C-2, C-3)`.
#[derive(Debug, Clone, Serialize)]
pub struct ClosedForm123 {
    pub capacity: u32,
    pub bins: f64,
    pub lambda: f64,
    /// `[C]_2 N / lambda^2 (5 - (89C - 28) / (5 lambda))`,
    /// `14 [C]_3 N / (5 lambda^3)`, `8 [C]_4 N / (7 lambda^4)`.
    pub nu: [f64; 3],
}

pub fn closed_form_sigma123(capacity: u32, bins: f64, lambda: f64) -> Result<ClosedForm123> {
    if capacity < 4 {
        return Err(Error::InvalidParams(format!(
            "triple (C-1, C-2, C-3) closed form needs C >= 4, got {capacity}"
        )));
    }
    if lambda < 10.0 {
        return Err(Error::InvalidParams(format!(
            "closed forms need lambda >= 10, got {lambda}"
        )));
    }
    let c = f64::from(capacity);
    let nu1 = falling(capacity, 2) * bins / lambda.powi(2) * (5.0 - (89.0 * c - 28.0) / (5.0 * lambda));
    let nu2 = 14.0 * falling(capacity, 3) * bins / (5.0 * lambda.powi(3));
    let nu3 = 8.0 * falling(capacity, 4) * bins / (7.0 * lambda.powi(4));
    Ok(ClosedForm123 {
        capacity,
        bins,
        lambda,
        nu: [nu1, nu2, nu3],
    })
}

/// Below this smallest mean the diagonal regime is flagged as not yet
/// asymptotic.
pub const DIAGONAL_MIN_MEAN: f64 = 30.0;

#[derive(Debug, Clone, Serialize)]
pub struct DiagonalModel {
    pub model: CovModel,
    pub mu: Vec<f64>,
    /// Smallest mean below `DIAGONAL_MIN_MEAN`.
    pub small_mean: bool,
}

/// `Sigma = diag(mu)` for levels all at most `C - 2`.
pub fn diagonal_regime_sigma(m: &[u32], tilt: &TiltSolution) -> Result<DiagonalModel> {
    validate_levels(m, tilt.capacity())?;
    let capacity = tilt.capacity();
    if let Some(&bad) = m.iter().find(|&&mi| mi + 2 > capacity) {
        return Err(Error::InvalidParams(format!(
            "level {bad} is above C-2 = {}; use build_sigma for levels C-1 and C",
            i64::from(capacity) - 2
        )));
    }
    let mu = OccupancyProfile::asymptotic(m, tilt)?.mu;
    let small_mean = mu.iter().copied().fold(f64::INFINITY, f64::min) < DIAGONAL_MIN_MEAN;
    let model = CovModel::new(Matrix::diagonal(&mu))?;
    Ok(DiagonalModel {
        model,
        mu,
        small_mean,
    })
}

/// Per-coordinate hypothesis diagnostics; smaller is better, and only their
/// trend along a ladder of instances is meaningful.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    /// `q_i = max_j |(Sigma^{1/2})_ij|`.
    pub q: Vec<f64>,
    /// `q_i / mu_i`.
    pub qmu: Vec<f64>,
    /// `max_j |(Sigma^{-1/2})_ij| q_i^2 / mu_i`.
    pub max: Vec<f64>,
    /// `max_j |(Sigma^{-1/2})_ij| mu_i^{1/3}`.
    pub extra: Vec<f64>,
    /// Bounding box of `diag(mu) Sigma^{-1/2} [c1, c2]^r`.
    pub k_domain_lo: Vec<f64>,
    pub k_domain_hi: Vec<f64>,
}

impl ConditionReport {
    pub fn worst_qmu(&self) -> f64 {
        self.qmu.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_max(&self) -> f64 {
        self.max.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_extra(&self) -> f64 {
        self.extra.iter().copied().fold(0.0, f64::max)
    }
}

pub fn check_conditions(model: &CovModel, mu: &[f64], c1: f64, c2: f64) -> Result<ConditionReport> {
    let r = model.r();
    if mu.len() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: mu.len(),
        });
    }
    if !(c1 < c2) {
        return Err(Error::InvalidParams(format!("need c1 < c2, got {c1} >= {c2}")));
    }
    let row_max = |m: &Matrix, i: usize| m.row(i).iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut report = ConditionReport {
        q: Vec::with_capacity(r),
        qmu: Vec::with_capacity(r),
        max: Vec::with_capacity(r),
        extra: Vec::with_capacity(r),
        k_domain_lo: Vec::with_capacity(r),
        k_domain_hi: Vec::with_capacity(r),
    };
    for i in 0..r {
        let q = row_max(&model.sqrt, i);
        let s_tilde = row_max(&model.invsqrt, i);
        report.q.push(q);
        report.qmu.push(q / mu[i]);
        report.max.push(s_tilde * q * q / mu[i]);
        report.extra.push(s_tilde * mu[i].cbrt());
        let (mut lo, mut hi) = (0.0, 0.0);
        for &s in model.invsqrt.row(i) {
            lo += (s * c1).min(s * c2);
            hi += (s * c1).max(s * c2);
        }
        report.k_domain_lo.push(mu[i] * lo);
        report.k_domain_hi.push(mu[i] * hi);
    }
    Ok(report)
}

/// Default smallest-eigenvalue threshold below which `Gamma` is reported as
/// not invertible.
pub const GAMMA_SINGULAR_THRESHOLD: f64 = 1e-6;

/// `Sigma = diag(sigma) Gamma diag(sigma)` with `Gamma` the correlation matrix.
#[derive(Debug, Clone, Serialize)]
pub struct GammaFactorization {
    pub scales: Vec<f64>,
    pub gamma: Matrix,
    pub min_eigenvalue: f64,
    pub threshold: f64,
    pub invertible: bool,
}

pub fn fixed_gamma_factorization(model: &CovModel, threshold: f64) -> GammaFactorization {
    let r = model.r();
    let scales: Vec<f64> = (0..r).map(|i| model.sigma[(i, i)].sqrt()).collect();
    let mut gamma = Matrix::zeros(r);
    for i in 0..r {
        for j in 0..r {
            gamma[(i, j)] = model.sigma[(i, j)] / (scales[i] * scales[j]);
        }
    }
    let min_eigenvalue = *jacobi_eigen(&gamma).values.last().expect("non-empty");
    GammaFactorization {
        scales,
        gamma,
        min_eigenvalue,
        threshold,
        invertible: min_eigenvalue > threshold,
    }
}
