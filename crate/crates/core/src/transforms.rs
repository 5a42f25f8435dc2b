//! Monotone element-wise transforms.
//!
//! Each coordinate of the approximation is mapped to the elliptical scale by
//! `psi = t((theta - mu) / sigma)`, where `t` is one of the shape transforms
//! below. The location/scale pair acts on `theta` directly, so the family of
//! marginals is closed under affine changes of `theta`.
//!
//! Shape parameters are stored unconstrained: Yeo-Johnson uses
//! `gamma = 2 * logistic(raw)` in `(0, 2)`, inverse G-and-H uses `g = raw[0]`
//! and `h = softplus(raw[1])`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logistic, logit, softplus, softplus_inv};

const IGH_TOL: f64 = 1e-12;
const IGH_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    #[serde(rename = "yj")]
    YeoJohnson,
    #[serde(rename = "igh")]
    InverseGh,
    #[serde(rename = "double-yj")]
    DoubleYeoJohnson,
}

impl TransformKind {
    /// Number of shape parameters.
    pub fn n_shape(self) -> usize {
        match self {
            TransformKind::Identity => 0,
            TransformKind::YeoJohnson => 1,
            TransformKind::InverseGh | TransformKind::DoubleYeoJohnson => 2,
        }
    }

    /// Raw shape values for which the transform is (close to) the identity.
    pub fn identity_raw(self) -> Vec<f64> {
        match self {
            TransformKind::Identity => vec![],
            TransformKind::YeoJohnson => vec![0.0],
            TransformKind::DoubleYeoJohnson => vec![0.0, 0.0],
            // h = softplus(-6) ~ 2.5e-3
            TransformKind::InverseGh => vec![0.0, -6.0],
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(TransformKind::Identity),
            "yj" => Ok(TransformKind::YeoJohnson),
            "igh" => Ok(TransformKind::InverseGh),
            "double-yj" | "doubleyj" => Ok(TransformKind::DoubleYeoJohnson),
            other => Err(Error::Domain(format!("unknown transform '{other}'"))),
        }
    }
}

/// Shape transform with constrained parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Identity,
    /// Yeo-Johnson with `gamma in (0, 2)`.
    Yj(f64),
    /// Inverse of the G-and-H map `T(z) = expm1(g z)/g * exp(h z^2 / 2)`.
    InverseGh { g: f64, h: f64 },
    /// `yj(., gamma2) o yj(., gamma1)`.
    DoubleYj(f64, f64),
}

// --- Yeo-Johnson ------------------------------------------------------------

/// `expm1(c * l) / c` with the `c -> 0` limit.
#[inline]
fn expm1_over(c: f64, l: f64) -> f64 {
    if c == 0.0 {
        l
    } else {
        (c * l).exp_m1() / c
    }
}

fn yj(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        expm1_over(gamma, x.ln_1p())
    } else {
        -expm1_over(2.0 - gamma, (-x).ln_1p())
    }
}

fn yj_d1(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        ((gamma - 1.0) * x.ln_1p()).exp()
    } else {
        ((1.0 - gamma) * (-x).ln_1p()).exp()
    }
}

fn yj_d2(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        (gamma - 1.0) * ((gamma - 2.0) * x.ln_1p()).exp()
    } else {
        (gamma - 1.0) * (-gamma * (-x).ln_1p()).exp()
    }
}

/// `ln1p(c a) / c` with the `c -> 0` limit.
#[inline]
fn log1p_over(c: f64, a: f64) -> f64 {
    if c == 0.0 {
        a
    } else {
        (c * a).ln_1p() / c
    }
}

fn yj_inv(psi: f64, gamma: f64) -> f64 {
    if psi >= 0.0 {
        log1p_over(gamma, psi).exp_m1()
    } else {
        -log1p_over(2.0 - gamma, -psi).exp_m1()
    }
}

/// `d/dc [ln1p(c a) / c]` for `a >= 0`, series near `c a = 0`.
fn dlog1p_over_dc(c: f64, a: f64) -> f64 {
    let u = c * a;
    if u.abs() < 1e-3 {
        // a^2 * sum_{k>=2} (-1)^{k+1} (k-1)/k u^{k-2}
        let mut acc = 0.0;
        let mut pow = 1.0;
        for k in 2..9 {
            let kf = k as f64;
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            acc += sign * (kf - 1.0) / kf * pow;
            pow *= u;
        }
        a * a * acc
    } else {
        (u / (1.0 + u) - u.ln_1p()) / (c * c)
    }
}

fn yj_inv_dgamma(psi: f64, gamma: f64) -> f64 {
    if psi >= 0.0 {
        log1p_over(gamma, psi).exp() * dlog1p_over_dc(gamma, psi)
    } else {
        let delta = 2.0 - gamma;
        log1p_over(delta, -psi).exp() * dlog1p_over_dc(delta, -psi)
    }
}

// --- G-and-H ----------------------------------------------------------------

/// `expm1(g z)/g` and its first two z-derivatives.
#[inline]
fn gh_a(z: f64, g: f64) -> (f64, f64, f64) {
    let e = (g * z).exp();
    (expm1_over(g, z), e, g * e)
}

fn gh(z: f64, g: f64, h: f64) -> f64 {
    expm1_over(g, z) * (0.5 * h * z * z).exp()
}

/// `(T, T', T'')` of the G-and-H map at `z`.
fn gh_derivs(z: f64, g: f64, h: f64) -> (f64, f64, f64) {
    let (a, a1, a2) = gh_a(z, g);
    let b = (0.5 * h * z * z).exp();
    let b1 = h * z * b;
    let b2 = (h + h * h * z * z) * b;
    (a * b, a1 * b + a * b1, a2 * b + 2.0 * a1 * b1 + a * b2)
}

/// `(dT/dg, dT/dh)` at `z`.
fn gh_param_grads(z: f64, g: f64, h: f64) -> (f64, f64) {
    let b = (0.5 * h * z * z).exp();
    let u = g * z;
    let da_dg = if u.abs() < 1e-3 {
        // sum_{n>=2} (n-1) g^{n-2} z^n / n!
        let mut acc = 0.0;
        let mut term = z * z / 2.0; // n = 2
        for n in 2..9 {
            let nf = n as f64;
            acc += (nf - 1.0) * term;
            term *= u / (nf + 1.0);
        }
        acc
    } else {
        (z * u.exp() * g - u.exp_m1()) / (g * g)
    };
    (da_dg * b, expm1_over(g, z) * 0.5 * z * z * b)
}

/// Solve `T(z) = x` by Newton steps safeguarded with bisection.
fn gh_solve(x: f64, g: f64, h: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(0.0);
    }
    // T(0) = 0 and T is increasing, so the root shares the sign of x.
    let (mut lo, mut hi) = if x > 0.0 { (0.0, 1.0) } else { (-1.0, 0.0) };
    let mut expand = 0;
    while (x > 0.0 && gh(hi, g, h) < x) || (x < 0.0 && gh(lo, g, h) > x) {
        if x > 0.0 {
            lo = hi;
            hi *= 2.0;
        } else {
            hi = lo;
            lo *= 2.0;
        }
        expand += 1;
        if expand > 1100 {
            return Err(Error::NoConvergence { what: "inverse G-and-H bracket", iterations: expand });
        }
    }
    let mut z = if x > lo && x < hi { x } else { 0.5 * (lo + hi) };
    for _ in 0..IGH_MAX_ITER {
        let (t, t1, _) = gh_derivs(z, g, h);
        let f = t - x;
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let mut next = z - f / t1;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= IGH_TOL * z.abs().max(1.0) {
            // one more Newton step brings the residual to rounding level
            let (t, t1, _) = gh_derivs(next, g, h);
            let polished = next - (t - x) / t1;
            return Ok(if polished.is_finite() { polished } else { next });
        }
        z = next;
    }
    Err(Error::NoConvergence { what: "inverse G-and-H root", iterations: IGH_MAX_ITER })
}

// --- Shape ------------------------------------------------------------------

impl Shape {
    pub fn forward(&self, x: f64) -> Result<f64> {
        check_finite(x, "transform input")?;
        Ok(match *self {
            Shape::Identity => x,
            Shape::Yj(gamma) => yj(x, gamma),
            Shape::InverseGh { g, h } => gh_solve(x, g, h)?,
            Shape::DoubleYj(g1, g2) => yj(yj(x, g1), g2),
        })
    }

    pub fn inverse(&self, psi: f64) -> Result<f64> {
        check_finite(psi, "transform input")?;
        Ok(match *self {
            Shape::Identity => psi,
            Shape::Yj(gamma) => yj_inv(psi, gamma),
            Shape::InverseGh { g, h } => gh(psi, g, h),
            Shape::DoubleYj(g1, g2) => yj_inv(yj_inv(psi, g2), g1),
        })
    }

    /// `(t'(x), t''(x))`.
    pub fn derivs(&self, x: f64) -> Result<(f64, f64)> {
        let psi = self.forward(x)?;
        Ok(self.derivs_with_image(x, psi))
    }

    /// `(t'(x), t''(x))` when `psi = t(x)` is already known; avoids the root
    /// solve for the inverse G-and-H transform.
    pub fn derivs_with_image(&self, x: f64, psi: f64) -> (f64, f64) {
        match *self {
            Shape::Identity => (1.0, 0.0),
            Shape::Yj(gamma) => (yj_d1(x, gamma), yj_d2(x, gamma)),
            Shape::InverseGh { g, h } => {
                let (_, t1, t2) = gh_derivs(psi, g, h);
                (1.0 / t1, -t2 / (t1 * t1 * t1))
            }
            Shape::DoubleYj(g1, g2) => {
                let y = yj(x, g1);
                let (a1, a2) = (yj_d1(x, g1), yj_d2(x, g1));
                let (b1, b2) = (yj_d1(y, g2), yj_d2(y, g2));
                (b1 * a1, b2 * a1 * a1 + b1 * a2)
            }
        }
    }

    /// `d t^{-1}(psi) / d psi` and the gradient of `t^{-1}(psi)` with respect
    /// to the constrained shape parameters.
    pub fn inverse_param_grads(&self, psi: f64) -> Result<(f64, Vec<f64>)> {
        check_finite(psi, "transform input")?;
        Ok(match *self {
            Shape::Identity => (1.0, vec![]),
            Shape::Yj(gamma) => {
                let x = yj_inv(psi, gamma);
                (1.0 / yj_d1(x, gamma), vec![yj_inv_dgamma(psi, gamma)])
            }
            Shape::InverseGh { g, h } => {
                let (_, t1, _) = gh_derivs(psi, g, h);
                let (dg, dh) = gh_param_grads(psi, g, h);
                (t1, vec![dg, dh])
            }
            Shape::DoubleYj(g1, g2) => {
                let y = yj_inv(psi, g2);
                let x = yj_inv(y, g1);
                let dx_dy = 1.0 / yj_d1(x, g1);
                let dy_dpsi = 1.0 / yj_d1(y, g2);
                (dx_dy * dy_dpsi, vec![yj_inv_dgamma(y, g1), dx_dy * yj_inv_dgamma(psi, g2)])
            }
        })
    }
}

#[inline]
fn check_finite(x: f64, what: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Transform for one coordinate: shape kind, unconstrained shape values and
/// the location/scale applied to `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub gamma_raw: Vec<f64>,
    pub mu: f64,
    pub log_sigma: f64,
}

impl TransformParams {
    pub fn new(kind: TransformKind, gamma_raw: Vec<f64>, mu: f64, log_sigma: f64) -> Result<Self> {
        if gamma_raw.len() != kind.n_shape() {
            return Err(Error::DimensionMismatch { expected: kind.n_shape(), found: gamma_raw.len() });
        }
        Ok(TransformParams { kind, gamma_raw, mu, log_sigma })
    }

    pub fn identity(mu: f64, sigma: f64) -> Self {
        TransformParams { kind: TransformKind::Identity, gamma_raw: vec![], mu, log_sigma: sigma.ln() }
    }

    /// Yeo-Johnson with constrained `gamma in (0, 2)`.
    pub fn yeo_johnson(gamma: f64, mu: f64, sigma: f64) -> Self {
        TransformParams {
            kind: TransformKind::YeoJohnson,
            gamma_raw: vec![logit(0.5 * gamma)],
            mu,
            log_sigma: sigma.ln(),
        }
    }

    /// Inverse G-and-H with constrained `g` and `h >= 0`.
    pub fn inverse_gh(g: f64, h: f64, mu: f64, sigma: f64) -> Self {
        TransformParams {
            kind: TransformKind::InverseGh,
            gamma_raw: vec![g, softplus_inv(h)],
            mu,
            log_sigma: sigma.ln(),
        }
    }

    pub fn double_yeo_johnson(gamma1: f64, gamma2: f64, mu: f64, sigma: f64) -> Self {
        TransformParams {
            kind: TransformKind::DoubleYeoJohnson,
            gamma_raw: vec![logit(0.5 * gamma1), logit(0.5 * gamma2)],
            mu,
            log_sigma: sigma.ln(),
        }
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn shape(&self) -> Shape {
        let r = &self.gamma_raw;
        match self.kind {
            TransformKind::Identity => Shape::Identity,
            TransformKind::YeoJohnson => Shape::Yj(2.0 * logistic(r[0])),
            TransformKind::InverseGh => Shape::InverseGh { g: r[0], h: softplus(r[1]) },
            TransformKind::DoubleYeoJohnson => {
                Shape::DoubleYj(2.0 * logistic(r[0]), 2.0 * logistic(r[1]))
            }
        }
    }

    /// Constrained shape parameter values.
    pub fn constrained_shape(&self) -> Vec<f64> {
        match self.shape() {
            Shape::Identity => vec![],
            Shape::Yj(g) => vec![g],
            Shape::InverseGh { g, h } => vec![g, h],
            Shape::DoubleYj(a, b) => vec![a, b],
        }
    }

    /// Derivatives of each constrained shape parameter with respect to its
    /// raw value.
    pub fn shape_chain(&self) -> Vec<f64> {
        let yj_chain = |r: f64| {
            let s = logistic(r);
            2.0 * s * (1.0 - s)
        };
        let r = &self.gamma_raw;
        match self.kind {
            TransformKind::Identity => vec![],
            TransformKind::YeoJohnson => vec![yj_chain(r[0])],
            TransformKind::InverseGh => vec![1.0, logistic(r[1])],
            TransformKind::DoubleYeoJohnson => vec![yj_chain(r[0]), yj_chain(r[1])],
        }
    }

    pub fn t_forward(&self, x: f64) -> Result<f64> {
        self.shape().forward(x)
    }

    pub fn t_inverse(&self, psi: f64) -> Result<f64> {
        self.shape().inverse(psi)
    }

    pub fn t_derivs(&self, x: f64) -> Result<(f64, f64)> {
        self.shape().derivs(x)
    }

    pub fn t_inverse_param_grads(&self, psi: f64) -> Result<(f64, Vec<f64>)> {
        self.shape().inverse_param_grads(psi)
    }

    /// `psi = t((theta - mu) / sigma)`.
    pub fn k_forward(&self, theta: f64) -> Result<f64> {
        check_finite(theta, "theta")?;
        self.t_forward((theta - self.mu) / self.sigma())
    }

    /// `theta = mu + sigma * t^{-1}(psi)`.
    pub fn h_inverse(&self, psi: f64) -> Result<f64> {
        Ok(self.mu + self.sigma() * self.t_inverse(psi)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn yj_fixes_origin_and_gamma_one_is_identity() {
        for &g in &[0.1, 0.7, 1.3, 1.9] {
            assert_eq!(Shape::Yj(g).forward(0.0).unwrap(), 0.0);
            assert_eq!(Shape::Yj(g).inverse(0.0).unwrap(), 0.0);
        }
        for &x in &[-2.0, 0.5, 3.0] {
            assert_relative_eq!(Shape::Yj(1.0).forward(x).unwrap(), x, epsilon = 1e-15);
        }
        let (d1, d2) = Shape::Yj(1.0).derivs(0.37).unwrap();
        assert_eq!((d1, d2), (1.0, 0.0));
        for &psi in &[-1.0, 0.0, 2.0] {
            let (dpsi, _) = Shape::Yj(1.0).inverse_param_grads(psi).unwrap();
            assert_relative_eq!(dpsi, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn igh_hand_values() {
        // T_{1,0}(z) = e^z - 1
        let s = Shape::InverseGh { g: 1.0, h: 0.0 };
        assert_relative_eq!(s.forward(E - 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.inverse(1.0).unwrap(), E - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn igh_derivative_by_inverse_function_theorem() {
        let s = Shape::InverseGh { g: 1.0, h: 0.1 };
        let x = 0.3;
        let z = s.forward(x).unwrap();
        let (_, tp, _) = gh_derivs(z, 1.0, 0.1);
        let (d1, _) = s.derivs(x).unwrap();
        assert_relative_eq!(d1, 1.0 / tp, max_relative = 1e-14);
        assert_relative_eq!(d1, central(|x| s.forward(x).unwrap(), x), max_relative = 1e-7);
    }

    #[test]
    fn yj_finite_difference_checks() {
        let s = Shape::Yj(2.0 - 1e-12);
        let x = -0.5;
        let (d1, d2) = s.derivs(x).unwrap();
        assert_relative_eq!(d1, central(|x| s.forward(x).unwrap(), x), max_relative = 1e-6);
        assert_relative_eq!(d2, central(|x| s.derivs(x).unwrap().0, x), max_relative = 1e-6);

        let s = Shape::Yj(1.5);
        let (dpsi, dg) = s.inverse_param_grads(0.8).unwrap();
        assert_relative_eq!(dpsi, central(|p| s.inverse(p).unwrap(), 0.8), max_relative = 1e-6);
        assert_relative_eq!(dg[0], central(|g| yj_inv(0.8, g), 1.5), max_relative = 1e-6);
    }

    #[test]
    fn identity_reductions() {
        let p = TransformParams::identity(0.0, 2.0);
        assert_eq!(p.k_forward(4.0).unwrap(), 2.0);
        let p = TransformParams::identity(3.0, 1.0);
        assert_eq!(p.k_forward(3.0).unwrap(), 0.0);
        let p = TransformParams::yeo_johnson(1.0, 1.0, 2.0);
        assert_relative_eq!(p.k_forward(5.0).unwrap(), 2.0, epsilon = 1e-12);
        let p = TransformParams::yeo_johnson(1.0, -2.0, 3.0);
        assert_relative_eq!(p.h_inverse(1.0).unwrap(), 1.0, epsilon = 1e-12);
        let p = TransformParams::identity(0.0, 1.0);
        assert_eq!(p.h_inverse(-0.3).unwrap(), -0.3);
        let (dpsi, dg) = p.t_inverse_param_grads(1.2).unwrap();
        assert_eq!(dpsi, 1.0);
        assert!(dg.is_empty());
        // IGH at g -> 0, h = 0 is the identity. At g = 1e-6 the leading
        // deviation is g x^2 / 2, so 1e-8 holds for |x| <= 0.1.
        let s = Shape::InverseGh { g: 0.0, h: 0.0 };
        for &x in &[-3.0, -0.2, 0.4, 2.5] {
            assert!((s.forward(x).unwrap() - x).abs() < 1e-8);
        }
        let s = Shape::InverseGh { g: 1e-6, h: 0.0 };
        for &x in &[-0.1, -0.03, 0.05, 0.1] {
            assert!((s.forward(x).unwrap() - x).abs() < 1e-8);
        }
        for &x in &[-3.0, 2.5] {
            assert!((s.forward(x).unwrap() - x).abs() < 1e-6 * x * x);
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let p = TransformParams::yeo_johnson(0.5, 0.0, 1.0);
        assert!(p.t_forward(f64::NAN).is_err());
        assert!(p.t_inverse(f64::INFINITY).is_err());
        assert!(p.k_forward(f64::NAN).is_err());
    }

    #[test]
    fn raw_parameter_round_trip() {
        let p = TransformParams::inverse_gh(-0.4, 0.3, 1.0, 2.0);
        let c = p.constrained_shape();
        assert_relative_eq!(c[0], -0.4, epsilon = 1e-14);
        assert_relative_eq!(c[1], 0.3, epsilon = 1e-14);
        let p = TransformParams::double_yeo_johnson(0.4, 1.6, 0.0, 1.0);
        let c = p.constrained_shape();
        assert_relative_eq!(c[0], 0.4, epsilon = 1e-14);
        assert_relative_eq!(c[1], 1.6, epsilon = 1e-14);
    }

    fn any_shape() -> impl Strategy<Value = Shape> {
        prop_oneof![
            Just(Shape::Identity),
            (0.05f64..1.95).prop_map(Shape::Yj),
            (-1.0f64..1.0, 0.0f64..0.5).prop_map(|(g, h)| Shape::InverseGh { g, h }),
            (0.2f64..1.8, 0.2f64..1.8).prop_map(|(a, b)| Shape::DoubleYj(a, b)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone(s in any_shape(), a in -6.0f64..6.0, b in -6.0f64..6.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.forward(lo).unwrap() < s.forward(hi).unwrap());
        }

        #[test]
        fn derivatives_match_central_differences(s in any_shape(), x in -4.0f64..4.0) {
            // keep away from the YJ kink at the origin where t'' jumps
            prop_assume!(x.abs() > 1e-3);
            let (d1, d2) = s.derivs(x).unwrap();
            prop_assert!(d1 > 0.0);
            let fd1 = central(|x| s.forward(x).unwrap(), x);
            let fd2 = central(|x| s.derivs(x).unwrap().0, x);
            prop_assert!((d1 - fd1).abs() <= 1e-5 * d1.abs().max(1e-3), "t' {} vs {}", d1, fd1);
            prop_assert!((d2 - fd2).abs() <= 1e-5 * d2.abs().max(1e-2), "t'' {} vs {}", d2, fd2);
        }

        #[test]
        fn inverse_grads_match_central_differences(s in any_shape(), psi in -3.0f64..3.0) {
            let (dpsi, dgam) = s.inverse_param_grads(psi).unwrap();
            let fd = central(|p| s.inverse(p).unwrap(), psi);
            prop_assert!((dpsi - fd).abs() <= 1e-5 * dpsi.abs().max(1e-3));
            let params: Vec<f64> = match s {
                Shape::Identity => vec![],
                Shape::Yj(g) => vec![g],
                Shape::InverseGh { g, h } => vec![g, h],
                Shape::DoubleYj(a, b) => vec![a, b],
            };
            let rebuild = |p: &[f64]| match s {
                Shape::Identity => Shape::Identity,
                Shape::Yj(_) => Shape::Yj(p[0]),
                Shape::InverseGh { .. } => Shape::InverseGh { g: p[0], h: p[1] },
                Shape::DoubleYj(..) => Shape::DoubleYj(p[0], p[1]),
            };
            for k in 0..params.len() {
                let fdk = central(|v| {
                    let mut p = params.clone();
                    p[k] = v;
                    rebuild(&p).inverse(psi).unwrap()
                }, params[k]);
                prop_assert!((dgam[k] - fdk).abs() <= 1e-5 * dgam[k].abs().max(1e-3),
                    "param {} analytic {} fd {}", k, dgam[k], fdk);
            }
        }

        #[test]
        fn round_trip(s in any_shape(), mu in -5.0f64..5.0, ls in -2.0f64..2.0, theta in -8.0f64..8.0) {
            let p = match s {
                Shape::Identity => TransformParams::identity(mu, ls.exp()),
                Shape::Yj(g) => TransformParams::yeo_johnson(g, mu, ls.exp()),
                Shape::InverseGh { g, h } => TransformParams::inverse_gh(g, h, mu, ls.exp()),
                Shape::DoubleYj(a, b) => TransformParams::double_yeo_johnson(a, b, mu, ls.exp()),
            };
            let back = p.h_inverse(p.k_forward(theta).unwrap()).unwrap();
            prop_assert!((back - theta).abs() <= 1e-9 * theta.abs().max(1.0));
            let x = (theta - mu) / ls.exp();
            let rt = p.t_inverse(p.t_forward(x).unwrap()).unwrap();
            prop_assert!((rt - x).abs() < 1e-10 * x.abs().max(1.0));
        }
    }
}
