//! Unit-diagonal factor scale matrix `Sigma = B B' + D^2`.
//!
//! Row `j` of `[d B]` lies on the unit sphere in `R^{K+1}` and is written in
//! spherical coordinates with angles `kappa_{j,1..K}`; the angles are in turn
//! unconstrained through `kappa = pi * Phi(tau)` (`2 pi * Phi(tau)` for the
//! last angle). Solves and log-determinants go through the Woodbury identity
//! so nothing larger than `K x K` is ever factorized.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{std_normal_cdf, std_normal_pdf, std_normal_quantile};

const PHI_CLAMP: f64 = 1e-10;
/// Smallest admissible `|d_j|`.
pub const D_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScale {
    pub m: usize,
    pub k: usize,
    /// `m x K` angle parameters, row-major.
    pub tau: Vec<f64>,
}

impl FactorScale {
    pub fn new(m: usize, k: usize, tau: Vec<f64>) -> Result<Self> {
        if tau.len() != m * k {
            return Err(Error::DimensionMismatch { expected: m * k, found: tau.len() });
        }
        Ok(FactorScale { m, k, tau })
    }

    /// Starting point: first angle of every row at `Phi^{-1}(0.1)` so that
    /// `d_j` is well away from zero, the rest jittered around zero.
    pub fn init<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Self {
        let jitter = Normal::new(0.0, 0.01).expect("valid normal");
        let first = std_normal_quantile(0.1);
        let mut tau = Vec::with_capacity(m * k);
        for _ in 0..m {
            for l in 0..k {
                tau.push(if l == 0 { first } else { jitter.sample(rng) });
            }
        }
        FactorScale { m, k, tau }
    }

    pub fn tau_row(&self, j: usize) -> &[f64] {
        &self.tau[j * self.k..(j + 1) * self.k]
    }

    /// `(B, d)`.
    pub fn build_b_d(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut b = DMatrix::zeros(self.m, self.k);
        let mut d = DVector::from_element(self.m, 1.0);
        for j in 0..self.m {
            let a = angles_to_row(&tau_to_angles(self.tau_row(j)));
            d[j] = a[0];
            for l in 0..self.k {
                b[(j, l)] = a[l + 1];
            }
        }
        (b, d)
    }

    /// Dense `Sigma`; for tests and small problems.
    pub fn dense_sigma(&self) -> DMatrix<f64> {
        let (b, d) = self.build_b_d();
        &b * b.transpose() + DMatrix::from_diagonal(&d.map(|x| x * x))
    }
}

/// Clamped `Phi(tau)` and its derivative (zero where the clamp is active).
#[inline]
fn clamped_phi(t: f64) -> (f64, f64) {
    let p = std_normal_cdf(t);
    if p < PHI_CLAMP {
        (PHI_CLAMP, 0.0)
    } else if p > 1.0 - PHI_CLAMP {
        (1.0 - PHI_CLAMP, 0.0)
    } else {
        (p, std_normal_pdf(t))
    }
}

#[inline]
fn angle_span(l: usize, k: usize) -> f64 {
    if l + 1 == k {
        2.0 * PI
    } else {
        PI
    }
}

pub fn tau_to_angles(tau_row: &[f64]) -> Vec<f64> {
    let k = tau_row.len();
    tau_row.iter().enumerate().map(|(l, &t)| angle_span(l, k) * clamped_phi(t).0).collect()
}

/// `d kappa_l / d tau_l`.
pub fn angles_dtau(tau_row: &[f64]) -> Vec<f64> {
    let k = tau_row.len();
    tau_row.iter().enumerate().map(|(l, &t)| angle_span(l, k) * clamped_phi(t).1).collect()
}

/// Point on the unit sphere: `a_1 = cos k_1`, `a_i = cos k_i prod_{s<i} sin k_s`,
/// `a_{K+1} = prod_s sin k_s`.
pub fn angles_to_row(angles: &[f64]) -> Vec<f64> {
    let k = angles.len();
    let mut a = Vec::with_capacity(k + 1);
    let mut prod = 1.0;
    for &ang in angles {
        a.push(ang.cos() * prod);
        prod *= ang.sin();
    }
    a.push(prod);
    a
}

/// `(K+1) x K` Jacobian `d a / d kappa`.
pub fn row_jacobian(angles: &[f64]) -> DMatrix<f64> {
    let k = angles.len();
    let (s, c): (Vec<f64>, Vec<f64>) = angles.iter().map(|a| a.sin_cos()).unzip();
    // product of sines over i < n, skipping index `skip`
    let sin_prod = |n: usize, skip: usize| -> f64 {
        (0..n).filter(|&i| i != skip).map(|i| s[i]).product()
    };
    let mut jac = DMatrix::zeros(k + 1, k);
    for row in 0..=k {
        for l in 0..k {
            jac[(row, l)] = if row < k {
                match l.cmp(&row) {
                    std::cmp::Ordering::Greater => 0.0,
                    std::cmp::Ordering::Equal => -s[row] * sin_prod(row, usize::MAX),
                    std::cmp::Ordering::Less => c[row] * c[l] * sin_prod(row, l),
                }
            } else {
                c[l] * sin_prod(k, l)
            };
        }
    }
    jac
}

/// Woodbury factorization of `Sigma = B B' + D^2`.
#[derive(Debug, Clone)]
pub struct ScaleSolver {
    b: DMatrix<f64>,
    d_inv2: DVector<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    log_det: f64,
}

impl ScaleSolver {
    pub fn new(b: &DMatrix<f64>, d: &DVector<f64>) -> Result<Self> {
        if b.nrows() != d.len() {
            return Err(Error::DimensionMismatch { expected: d.len(), found: b.nrows() });
        }
        let mut log_det = 0.0;
        for (j, &dj) in d.iter().enumerate() {
            if !(dj.abs() >= D_FLOOR) {
                return Err(Error::DegenerateScale { row: j, value: dj.abs() });
            }
            log_det += 2.0 * dj.abs().ln();
        }
        let d_inv2 = d.map(|x| 1.0 / (x * x));
        let chol = if b.ncols() == 0 {
            None
        } else {
            let mut c = b.transpose() * DMatrix::from_diagonal(&d_inv2) * b;
            for i in 0..c.nrows() {
                c[(i, i)] += 1.0;
            }
            let chol = nalgebra::Cholesky::new(c)
                .ok_or_else(|| Error::IllConditioned("capacitance matrix is not positive definite".into()))?;
            log_det += 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Some(chol)
        };
        Ok(ScaleSolver { b: b.clone(), d_inv2, chol, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Sigma^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let dv = v.component_mul(&self.d_inv2);
        match &self.chol {
            None => dv,
            Some(chol) => {
                let inner = chol.solve(&(self.b.transpose() * &dv));
                dv - (&self.b * inner).component_mul(&self.d_inv2)
            }
        }
    }
}

/// `(Sigma^{-1} v, log|Sigma|)`.
pub fn sigma_solve_logdet(b: &DMatrix<f64>, d: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let solver = ScaleSolver::new(b, d)?;
    Ok((solver.solve(v), solver.log_det()))
}

/// Jacobian of `psi = sqrt(w) (B z + D eps)` with respect to `tau`. Row `j`
/// of `psi` depends only on row `j` of `tau`, so the result is returned in
/// compact `m x K` form: entry `(j, l)` is `d psi_j / d tau_{j,l}`; all
/// cross-row entries are zero.
pub fn dpsi_dtau(z: &DVector<f64>, eps: &DVector<f64>, w: f64, fs: &FactorScale) -> DMatrix<f64> {
    let sw = w.sqrt();
    let mut out = DMatrix::zeros(fs.m, fs.k);
    for j in 0..fs.m {
        let tau = fs.tau_row(j);
        let jac = row_jacobian(&tau_to_angles(tau));
        let dk = angles_dtau(tau);
        for l in 0..fs.k {
            let mut acc = eps[j] * jac[(0, l)];
            for q in 0..fs.k {
                acc += z[q] * jac[(q + 1, l)];
            }
            out[(j, l)] = sw * acc * dk[l];
        }
    }
    out
}

/// Expand the compact `dpsi_dtau` into the full `m x mK` matrix.
pub fn expand_dpsi_dtau(compact: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = compact.shape();
    let mut full = DMatrix::zeros(m, m * k);
    for j in 0..m {
        for l in 0..k {
            full[(j, j * k + l)] = compact[(j, l)];
        }
    }
    full
}
