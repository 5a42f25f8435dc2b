//! Gaussian copula posterior over a correlation matrix whose Cholesky factor is
//! written in spherical coordinates, with horseshoe shrinkage of the angles in
//! probit space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::TargetModel;
use crate::error::{Error, Result};
use crate::factor_scale::{angles_to_row, row_jacobian};
use crate::numerics::{std_normal_cdf, std_normal_ln_pdf, std_normal_pdf};

/// Angles are kept this far inside `(0, pi)` before building `L`.
pub const ANGLE_GUARD: f64 = 1e-8;
/// Scale of the inverse-gamma prior on the local and global mixing scales.
pub const HYPER_SCALE: f64 = 20.0;

pub fn n_pairs(r: usize) -> usize {
    r * r.saturating_sub(1) / 2
}

/// Position of the pair `(i, j)`, `j < i`, both 0-based.
#[inline]
pub fn pair_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// Recover `r` from the number of pairs.
pub fn r_from_pairs(n: usize) -> Result<usize> {
    let r = ((1.0 + (1.0 + 8.0 * n as f64).sqrt()) / 2.0).round() as usize;
    if n_pairs(r) != n {
        return Err(Error::DimensionMismatch { expected: n_pairs(r), found: n });
    }
    Ok(r)
}

/// `theta = (tau, log chi, log xi, log nu, log kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrModelParams {
    pub tau_hs: Vec<f64>,
    pub log_chi: Vec<f64>,
    pub log_xi: f64,
    pub log_nu_hs: Vec<f64>,
    pub log_kappa: f64,
}

impl CorrModelParams {
    pub fn dim_for(r: usize) -> usize {
        3 * n_pairs(r) + 2
    }

    /// Dimension `r` implied by a flattened length `3 r(r-1)/2 + 2`.
    pub fn r_for_dim(m: usize) -> Result<usize> {
        if m < 2 || !(m - 2).is_multiple_of(3) {
            return Err(Error::DimensionMismatch { expected: 2, found: m });
        }
        r_from_pairs((m - 2) / 3)
    }

    pub fn from_theta(theta: &[f64], r: usize) -> Result<Self> {
        let s = n_pairs(r);
        if theta.len() != 3 * s + 2 {
            return Err(Error::DimensionMismatch { expected: 3 * s + 2, found: theta.len() });
        }
        Ok(CorrModelParams {
            tau_hs: theta[..s].to_vec(),
            log_chi: theta[s..2 * s].to_vec(),
            log_xi: theta[2 * s],
            log_nu_hs: theta[2 * s + 1..3 * s + 1].to_vec(),
            log_kappa: theta[3 * s + 1],
        })
    }

    pub fn to_theta(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.n_pairs() + 2);
        v.extend_from_slice(&self.tau_hs);
        v.extend_from_slice(&self.log_chi);
        v.push(self.log_xi);
        v.extend_from_slice(&self.log_nu_hs);
        v.push(self.log_kappa);
        v
    }

    pub fn n_pairs(&self) -> usize {
        self.tau_hs.len()
    }

    pub fn r(&self) -> Result<usize> {
        r_from_pairs(self.n_pairs())
    }

    fn check(&self) -> Result<usize> {
        let s = self.n_pairs();
        if self.log_chi.len() != s || self.log_nu_hs.len() != s {
            return Err(Error::DimensionMismatch { expected: s, found: self.log_chi.len().min(self.log_nu_hs.len()) });
        }
        self.r()
    }

    /// `eta_s = tau_s sqrt(xi chi_s)`.
    pub fn eta(&self) -> Vec<f64> {
        self.tau_hs
            .iter()
            .zip(&self.log_chi)
            .map(|(t, lc)| t * (0.5 * (self.log_xi + lc)).exp())
            .collect()
    }

    pub fn vartheta(&self) -> Vec<f64> {
        self.eta().iter().map(|&e| vartheta_of_eta(e).0).collect()
    }

    pub fn omega(&self) -> Result<DMatrix<f64>> {
        let l = chol_from_angles(&self.vartheta())?;
        Ok(&l * l.transpose())
    }
}

/// `vartheta = pi Phi(eta)` clamped inside `(0, pi)`, with its derivative
/// (zero once clamped).
pub fn vartheta_of_eta(eta: f64) -> (f64, f64) {
    let v = PI * std_normal_cdf(eta);
    if v < ANGLE_GUARD {
        (ANGLE_GUARD, 0.0)
    } else if v > PI - ANGLE_GUARD {
        (PI - ANGLE_GUARD, 0.0)
    } else {
        (v, PI * std_normal_pdf(eta))
    }
}

/// Lower-triangular `L` with unit-norm rows. Row `i` is the point on the
/// sphere given by the angles `vartheta_{i,0..i}`; row 0 is `e_1`.
pub fn chol_from_angles(vartheta: &[f64]) -> Result<DMatrix<f64>> {
    let r = r_from_pairs(vartheta.len())?;
    let mut l = DMatrix::zeros(r, r);
    l[(0, 0)] = 1.0;
    for i in 1..r {
        let row = angles_to_row(&vartheta[pair_index(i, 0)..pair_index(i, 0) + i]);
        for (j, a) in row.into_iter().enumerate() {
            l[(i, j)] = a;
        }
    }
    Ok(l)
}

/// Nonzero blocks of `dL/dvartheta`: entry `i - 1` is the `(i+1) x i` matrix
/// `d l_{i, 0..=i} / d vartheta_{i, 0..i}`. Rows of `L` depend only on their
/// own angles, so every other entry is zero.
pub fn dl_dvartheta(vartheta: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let r = r_from_pairs(vartheta.len())?;
    Ok((1..r).map(|i| row_jacobian(&vartheta[pair_index(i, 0)..pair_index(i, 0) + i])).collect())
}

/// Normal scores `x_i` as the rows of an `N x r` matrix, with the scatter
/// matrix `sum_i x_i x_i'` cached.
#[derive(Debug, Clone)]
pub struct CopulaData {
    x: DMatrix<f64>,
    scatter: DMatrix<f64>,
}

impl CopulaData {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("copula data"));
        }
        if x.ncols() < 2 {
            return Err(Error::Data(format!("need at least two margins, got {}", x.ncols())));
        }
        let scatter = x.tr_mul(&x);
        Ok(CopulaData { x, scatter })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn r(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }
}

struct LikTerms {
    loglik: f64,
    /// `d loglik / dL`, full matrix (only the lower triangle is used).
    grad_l: Option<DMatrix<f64>>,
}

fn likelihood(l: &DMatrix<f64>, data: &CopulaData, want_grad: bool) -> Result<LikTerms> {
    let r = l.nrows();
    let n = data.n() as f64;
    let mut half_log_det = 0.0;
    for i in 0..r {
        let d = l[(i, i)];
        if !(d > 1e-150) {
            return Err(Error::IllConditioned(format!("correlation matrix is singular (L[{i},{i}] = {d:e})")));
        }
        half_log_det += d.ln();
    }
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or_else(|| Error::IllConditioned("triangular solve of L".into()))?;
    let omega_inv = linv.tr_mul(&linv);
    let s = data.scatter();
    let tr_inv_s = omega_inv.component_mul(s).sum();
    let loglik = -n * half_log_det - 0.5 * (tr_inv_s - s.trace());
    if !loglik.is_finite() {
        return Err(Error::IllConditioned("non-finite copula likelihood".into()));
    }
    let grad_l = want_grad.then(|| {
        // Omega^{-1} L = L^{-T}
        let linv_t = linv.transpose();
        &omega_inv * s * &linv_t - linv_t * n
    });
    Ok(LikTerms { loglik, grad_l })
}

/// Log prior of the transformed horseshoe parameters.
pub fn corr_log_prior(theta: &CorrModelParams) -> f64 {
    let xi = theta.log_xi.exp();
    let kappa = theta.log_kappa.exp();
    let mut lp = 0.0;
    for s in 0..theta.n_pairs() {
        let (t, lc, ln) = (theta.tau_hs[s], theta.log_chi[s], theta.log_nu_hs[s]);
        lp += std_normal_ln_pdf(t);
        lp += -0.5 * ln - 0.5 * lc - (-(ln + lc)).exp();
        lp += -0.5 * ln - HYPER_SCALE * (-ln).exp();
    }
    lp += -0.5 * theta.log_kappa - 0.5 * theta.log_xi - 1.0 / (kappa * xi);
    lp += -0.5 * theta.log_kappa - HYPER_SCALE / kappa;
    lp
}

/// Log posterior up to the constant marginal-density term.
pub fn corr_log_posterior(theta: &CorrModelParams, data: &CopulaData) -> Result<f64> {
    check_dims(theta, data)?;
    let l = chol_from_angles(&theta.vartheta())?;
    Ok(likelihood(&l, data, false)?.loglik + corr_log_prior(theta))
}

/// Log posterior and its gradient in the flattened `theta` order.
pub fn corr_log_posterior_and_grad(theta: &CorrModelParams, data: &CopulaData) -> Result<(f64, DVector<f64>)> {
    check_dims(theta, data)?;
    let np = theta.n_pairs();
    let eta = theta.eta();
    let (vartheta, dvt): (Vec<f64>, Vec<f64>) = eta.iter().map(|&e| vartheta_of_eta(e)).unzip();
    let l = chol_from_angles(&vartheta)?;
    let lik = likelihood(&l, data, true)?;
    let gl = lik.grad_l.expect("gradient requested");

    // d loglik / d eta
    let mut d_eta = vec![0.0; np];
    for (idx, jac) in dl_dvartheta(&vartheta)?.iter().enumerate() {
        let i = idx + 1;
        let base = pair_index(i, 0);
        for k in 0..i {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += gl[(i, j)] * jac[(j, k)];
            }
            d_eta[base + k] = acc * dvt[base + k];
        }
    }

    let xi = theta.log_xi.exp();
    let kappa = theta.log_kappa.exp();
    let mut g = DVector::zeros(3 * np + 2);
    let mut d_xi = 0.0;
    for s in 0..np {
        let tau = theta.tau_hs[s];
        let root = (0.5 * (theta.log_xi + theta.log_chi[s])).exp();
        let nu_chi_inv = (-(theta.log_nu_hs[s] + theta.log_chi[s])).exp();
        g[s] = root * d_eta[s] - tau;
        g[np + s] = 0.5 * tau * root * d_eta[s] - 0.5 + nu_chi_inv;
        g[2 * np + 1 + s] = -0.5 + nu_chi_inv - 0.5 + HYPER_SCALE * (-theta.log_nu_hs[s]).exp();
        d_xi += 0.5 * tau * root * d_eta[s];
    }
    g[2 * np] = d_xi - 0.5 + 1.0 / (kappa * xi);
    g[3 * np + 1] = -0.5 + 1.0 / (kappa * xi) - 0.5 + HYPER_SCALE / kappa;
    Ok((lik.loglik + corr_log_prior(theta), g))
}

pub fn corr_grad(theta: &CorrModelParams, data: &CopulaData) -> Result<DVector<f64>> {
    Ok(corr_log_posterior_and_grad(theta, data)?.1)
}

fn check_dims(theta: &CorrModelParams, data: &CopulaData) -> Result<usize> {
    let r = theta.check()?;
    if r != data.r() {
        return Err(Error::DimensionMismatch { expected: data.r(), found: r });
    }
    Ok(r)
}

/// Element-wise `(6/pi) asin(rho/2)`.
pub fn spearman_from_omega(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = omega.clone();
    for v in out.iter_mut() {
        if !(-1.0..=1.0).contains(v) {
            return Err(Error::Domain(format!("correlation {v} outside [-1, 1]")));
        }
        *v = 6.0 / PI * (0.5 * *v).asin();
    }
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] = 1.0;
    }
    Ok(out)
}

/// The correlation-matrix posterior as a target for variational inference.
#[derive(Debug, Clone)]
pub struct CorrTarget {
    data: CopulaData,
}

impl CorrTarget {
    pub fn new(data: CopulaData) -> Self {
        CorrTarget { data }
    }

    pub fn data(&self) -> &CopulaData {
        &self.data
    }

    pub fn r(&self) -> usize {
        self.data.r()
    }

    fn params(&self, theta: &DVector<f64>) -> Result<CorrModelParams> {
        CorrModelParams::from_theta(theta.as_slice(), self.r())
    }
}

impl TargetModel for CorrTarget {
    fn dim(&self) -> usize {
        CorrModelParams::dim_for(self.r())
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        corr_log_posterior(&self.params(theta)?, &self.data)
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        corr_grad(&self.params(theta)?, &self.data)
    }

    fn log_density_and_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        corr_log_posterior_and_grad(&self.params(theta)?, &self.data)
    }
}
