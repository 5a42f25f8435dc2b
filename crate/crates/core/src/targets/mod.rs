//! Target densities `g(theta)`, known up to a constant.

use nalgebra::DVector;

use crate::error::Result;

pub mod corr;
pub mod gaussian;
pub mod skew_normal;

pub use corr::{CopulaData, CorrModelParams, CorrTarget};
pub use gaussian::GaussianTarget;
pub use skew_normal::SkewNormalTarget;

/// Unnormalized log posterior and its gradient.
pub trait TargetModel: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64>;

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Both at once; override when they share work.
    fn log_density_and_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.log_density(theta)?, self.grad_log_density(theta)?))
    }
}
