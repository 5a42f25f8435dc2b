//! Scale mixtures of normals: Gaussian, Student-t, Laplace and exponential
//! power. For each family we need the density generator `g~_m(x)` of the
//! quadratic form `x = psi' Sigma^{-1} psi` (normalizing constant included),
//! its log-derivative, the univariate marginal, and the quantile of the
//! mixing variable `W` used when sampling `psi = sqrt(W) X`.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{chi_squared_quantile, ln_bessel_k_with_ratio, ln_gamma_fn, logistic};

/// Smallest quadratic form value used for the Laplace kernel; below it the
/// Bessel terms cancel badly.
const LAPLACE_X_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Gaussian,
    #[serde(rename = "t")]
    StudentT,
    Laplace,
    ExpPower,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "t" | "student-t" | "studentt" => Ok(FamilyKind::StudentT),
            "laplace" => Ok(FamilyKind::Laplace),
            "exp-power" | "exppower" => Ok(FamilyKind::ExpPower),
            other => Err(Error::Domain(format!("unknown family '{other}'"))),
        }
    }
}

/// Family tag plus its unconstrained parameter: `nu = exp(raw)` for the
/// Student-t and `beta = logistic(raw)` for the exponential power family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticalFamily {
    pub kind: FamilyKind,
    pub omega_raw: Vec<f64>,
}

impl EllipticalFamily {
    pub fn gaussian() -> Self {
        EllipticalFamily { kind: FamilyKind::Gaussian, omega_raw: vec![] }
    }

    pub fn student_t(nu: f64) -> Self {
        EllipticalFamily { kind: FamilyKind::StudentT, omega_raw: vec![nu.ln()] }
    }

    pub fn laplace() -> Self {
        EllipticalFamily { kind: FamilyKind::Laplace, omega_raw: vec![] }
    }

    pub fn exp_power(beta: f64) -> Self {
        EllipticalFamily { kind: FamilyKind::ExpPower, omega_raw: vec![(beta / (1.0 - beta)).ln()] }
    }

    /// Family with its default starting parameter (`nu = 20`, `beta = 1/2`).
    pub fn default_for(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Gaussian => Self::gaussian(),
            FamilyKind::StudentT => Self::student_t(20.0),
            FamilyKind::Laplace => Self::laplace(),
            FamilyKind::ExpPower => Self::exp_power(0.5),
        }
    }

    pub fn n_omega(&self) -> usize {
        match self.kind {
            FamilyKind::Gaussian | FamilyKind::Laplace => 0,
            FamilyKind::StudentT | FamilyKind::ExpPower => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::StudentT => "t",
            FamilyKind::Laplace => "laplace",
            FamilyKind::ExpPower => "exp-power",
        }
    }

    /// Degrees of freedom of the Student-t family.
    pub fn nu(&self) -> Option<f64> {
        (self.kind == FamilyKind::StudentT).then(|| self.omega_raw[0].exp())
    }

    pub fn beta(&self) -> Option<f64> {
        (self.kind == FamilyKind::ExpPower).then(|| logistic(self.omega_raw[0]))
    }

    /// True when marginals stay in the family and `W` can be sampled.
    pub fn is_consistent(&self) -> bool {
        self.kind != FamilyKind::ExpPower
    }

    fn validate(&self) -> Result<()> {
        if self.omega_raw.len() != self.n_omega() {
            return Err(Error::DimensionMismatch { expected: self.n_omega(), found: self.omega_raw.len() });
        }
        if self.omega_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("family parameter"));
        }
        Ok(())
    }
}

fn check_x(x: f64, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Domain("dimension must be at least 1".into()));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("quadratic form must be non-negative, got {x}")));
    }
    Ok(())
}

/// `ln g~_m(x)` including the normalizing constant.
pub fn log_gtilde(x: f64, m: usize, fam: &EllipticalFamily) -> Result<f64> {
    check_x(x, m)?;
    fam.validate()?;
    let mf = m as f64;
    let v = match fam.kind {
        FamilyKind::Gaussian => -0.5 * mf * (2.0 * PI).ln() - 0.5 * x,
        FamilyKind::StudentT => {
            let nu = fam.omega_raw[0].exp();
            ln_gamma_fn(0.5 * (nu + mf)) - ln_gamma_fn(0.5 * nu) - 0.5 * mf * (PI * nu).ln()
                - 0.5 * (nu + mf) * (x / nu).ln_1p()
        }
        FamilyKind::Laplace => {
            let x = x.max(LAPLACE_X_FLOOR);
            let order = 0.5 * (2.0 - mf);
            let (ln_k, _) = ln_bessel_k_with_ratio(order, (2.0 * x).sqrt())?;
            LN_2 - 0.5 * mf * (2.0 * PI).ln() + 0.5 * order * (0.5 * x).ln() + ln_k
        }
        FamilyKind::ExpPower => {
            let beta = logistic(fam.omega_raw[0]);
            let a = 1.0 + mf / (2.0 * beta);
            mf.ln() + ln_gamma_fn(0.5 * mf) - ln_gamma_fn(a) - 0.5 * mf * PI.ln() - a * LN_2
                - 0.5 * x.powf(beta)
        }
    };
    if v.is_nan() {
        return Err(Error::NonFinite("density generator"));
    }
    Ok(v)
}

/// `g~'(x) / g~(x)`.
pub fn gtilde_log_ratio(x: f64, m: usize, fam: &EllipticalFamily) -> Result<f64> {
    check_x(x, m)?;
    fam.validate()?;
    let mf = m as f64;
    Ok(match fam.kind {
        FamilyKind::Gaussian => -0.5,
        FamilyKind::StudentT => {
            let nu = fam.omega_raw[0].exp();
            -((nu + mf) / (2.0 * nu)) / (1.0 + x / nu)
        }
        FamilyKind::Laplace => {
            let x = x.max(LAPLACE_X_FLOOR);
            let order = 0.5 * (2.0 - mf);
            let s = (2.0 * x).sqrt();
            let (_, k_ratio) = ln_bessel_k_with_ratio(order, s)?;
            // K_a'(s) / K_a(s) = a/s - K_{a+1}(s)/K_a(s) with a = |order|
            let dlogk = order.abs() / s - k_ratio;
            order / (2.0 * x) + dlogk / s
        }
        FamilyKind::ExpPower => {
            let beta = logistic(fam.omega_raw[0]);
            if x == 0.0 && beta < 1.0 {
                return Err(Error::Domain("exponential power ratio is singular at x = 0".into()));
            }
            -0.5 * beta * x.powf(beta - 1.0)
        }
    })
}

/// Log density of one coordinate of `psi`, i.e. `ln g~_1(psi^2)`.
pub fn marginal_log_density(psi: f64, fam: &EllipticalFamily) -> Result<f64> {
    if !fam.is_consistent() {
        return Err(Error::UnsupportedFamily { family: fam.name(), operation: "marginal density" });
    }
    if !psi.is_finite() {
        return Err(Error::NonFinite("psi"));
    }
    log_gtilde(psi * psi, 1, fam)
}

/// Quantile of the mixing variable `W` at `u`.
pub fn w_quantile(u: f64, fam: &EllipticalFamily) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("mixing quantile needs u in (0,1), got {u}")));
    }
    fam.validate()?;
    match fam.kind {
        FamilyKind::Gaussian => Ok(1.0),
        FamilyKind::Laplace => Ok(-(-u).ln_1p()),
        FamilyKind::StudentT => w_quantile_t(u, fam.omega_raw[0].exp()),
        FamilyKind::ExpPower => Err(Error::UnsupportedFamily { family: fam.name(), operation: "sampling" }),
    }
}

fn w_quantile_t(u: f64, nu: f64) -> Result<f64> {
    Ok(nu / chi_squared_quantile(1.0 - u, nu)?)
}

/// `d w_quantile / d nu` for the Student-t family by a central difference
/// with relative step `1e-4`.
pub fn w_quantile_domega(u: f64, fam: &EllipticalFamily) -> Result<f64> {
    w_quantile_domega_step(u, fam, 1e-4)
}

pub fn w_quantile_domega_step(u: f64, fam: &EllipticalFamily, rel_step: f64) -> Result<f64> {
    if fam.kind != FamilyKind::StudentT {
        return Err(Error::UnsupportedFamily { family: fam.name(), operation: "mixing quantile derivative" });
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("mixing quantile needs u in (0,1), got {u}")));
    }
    let nu = fam.omega_raw[0].exp();
    let h = rel_step * nu;
    Ok((w_quantile_t(u, nu + h)? - w_quantile_t(u, nu - h)?) / (2.0 * h))
}
