use std::f64::consts::{LN_2, PI};

use nalgebra::DVector;

use super::TargetModel;
use crate::error::{Error, Result};
use crate::numerics::{inverse_mills, std_normal_ln_cdf, std_normal_ln_pdf};

/// Largest attainable skewness of the skew-normal family (`alpha -> inf`).
pub const MAX_SKEW: f64 = 0.995_271_746_431_156;

/// Skew-normal density `2/omega phi(z) Phi(alpha z)`, `z = (x - xi)/omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewNormalTarget {
    pub xi: f64,
    pub omega: f64,
    pub alpha: f64,
}

impl SkewNormalTarget {
    pub fn new(xi: f64, omega: f64, alpha: f64) -> Result<Self> {
        if !(omega > 0.0) || !xi.is_finite() || !alpha.is_finite() {
            return Err(Error::Domain(format!("invalid skew-normal parameters ({xi}, {omega}, {alpha})")));
        }
        Ok(SkewNormalTarget { xi, omega, alpha })
    }

    /// Skew normal with the given mean, standard deviation and shape.
    pub fn from_mean_sd(mean: f64, sd: f64, alpha: f64) -> Result<Self> {
        let delta = delta_of(alpha);
        let b = (2.0 / PI).sqrt();
        let omega = sd / (1.0 - b * b * delta * delta).sqrt();
        Self::new(mean - omega * delta * b, omega, alpha)
    }

    pub fn mean(&self) -> f64 {
        self.xi + self.omega * delta_of(self.alpha) * (2.0 / PI).sqrt()
    }

    pub fn sd(&self) -> f64 {
        let d = delta_of(self.alpha);
        self.omega * (1.0 - 2.0 * d * d / PI).sqrt()
    }

    pub fn skewness(&self) -> f64 {
        skewness_of_delta(delta_of(self.alpha))
    }

    pub fn log_density(&self, x: f64) -> f64 {
        sn_log_density_and_grad(x, self).0
    }
}

#[inline]
fn delta_of(alpha: f64) -> f64 {
    alpha / (1.0 + alpha * alpha).sqrt()
}

fn skewness_of_delta(delta: f64) -> f64 {
    let mu = delta * (2.0 / PI).sqrt();
    0.5 * (4.0 - PI) * mu.powi(3) / (1.0 - mu * mu).powf(1.5)
}

/// Log density and its derivative in `x`.
pub fn sn_log_density_and_grad(x: f64, t: &SkewNormalTarget) -> (f64, f64) {
    let z = (x - t.xi) / t.omega;
    let az = t.alpha * z;
    let lp = LN_2 - t.omega.ln() + std_normal_ln_pdf(z) + std_normal_ln_cdf(az);
    let g = (-z + t.alpha * inverse_mills(az)) / t.omega;
    (lp, g)
}

/// Shape `alpha` whose standardized third moment equals `skew`, found by
/// bisection on `delta = alpha / sqrt(1 + alpha^2)`.
pub fn skew_to_alpha(skew: f64) -> Result<f64> {
    if !(skew.abs() < MAX_SKEW) {
        return Err(Error::Domain(format!("skewness {skew} outside the attainable range (-{MAX_SKEW}, {MAX_SKEW})")));
    }
    if skew == 0.0 {
        return Ok(0.0);
    }
    let target = skew.abs();
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if skewness_of_delta(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let delta = 0.5 * (lo + hi);
    Ok(skew.signum() * delta / (1.0 - delta * delta).sqrt())
}

impl TargetModel for SkewNormalTarget {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density_and_grad(theta)?.0)
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_density_and_grad(theta)?.1)
    }

    fn log_density_and_grad(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if theta.len() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, found: theta.len() });
        }
        let (lp, g) = sn_log_density_and_grad(theta[0], self);
        Ok((lp, DVector::from_element(1, g)))
    }
}
