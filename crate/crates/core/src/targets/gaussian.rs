use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::TargetModel;
use crate::error::{Error, Result};
use crate::numerics::LN_SQRT_2PI;

/// Multivariate normal `N(mean, cov)` with its normalizing constant, so the
/// ELBO against it is exactly `-KL(q || target)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: cov.nrows() });
        }
        let chol = Cholesky::new(cov).ok_or_else(|| Error::IllConditioned("target covariance".into()))?;
        let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum();
        let log_norm = -(mean.len() as f64) * LN_SQRT_2PI - half_log_det;
        Ok(GaussianTarget { mean, chol, log_norm })
    }

    pub fn standard(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n)).expect("identity covariance")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn check(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), found: theta.len() });
        }
        Ok(theta - &self.mean)
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density_and_grad(theta)?.0)
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(theta)?.1)
    }

    fn log_density_and_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let r = self.check(theta)?;
        let p = self.chol.solve(&r);
        Ok((self.log_norm - 0.5 * r.dot(&p), -p))
    }
}
