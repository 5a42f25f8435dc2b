//! Elliptical implicit copula variational approximation.
//!
//! A draw is generated as `psi = sqrt(w) (B z + D eps)` with `w` the mixing
//! variable of the elliptical family, then mapped coordinate-wise to
//! `theta_i = mu_i + sigma_i * t_i^{-1}(psi_i)`. The density of `theta` is
//!
//! ```text
//! q(theta) = |Sigma|^{-1/2} g~_m(psi' Sigma^{-1} psi) prod_i t_i'(x_i) / sigma_i
//! ```
//!
//! with `x_i = (theta_i - mu_i) / sigma_i` and `psi_i = t_i(x_i)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::elliptical::{
    gtilde_log_ratio, log_gtilde, marginal_log_density, w_quantile, w_quantile_domega, EllipticalFamily,
    FamilyKind,
};
use crate::error::{Error, Result};
use crate::factor_scale::{dpsi_dtau, FactorScale, ScaleSolver};
use crate::targets::TargetModel;
use crate::transforms::{Shape, TransformKind, TransformParams};

/// Variational parameters `lambda = (mu, log sigma, gamma, tau, omega)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub transforms: Vec<TransformParams>,
    pub scale: FactorScale,
    pub family: EllipticalFamily,
}

/// Offsets of each block in the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub m: usize,
    pub k: usize,
    pub n_gamma: usize,
    pub n_omega: usize,
}

impl ParamLayout {
    pub fn mu(&self) -> std::ops::Range<usize> {
        0..self.m
    }
    pub fn log_sigma(&self) -> std::ops::Range<usize> {
        self.m..2 * self.m
    }
    pub fn gamma(&self) -> std::ops::Range<usize> {
        let s = 2 * self.m;
        s..s + self.n_gamma
    }
    pub fn tau(&self) -> std::ops::Range<usize> {
        let s = 2 * self.m + self.n_gamma;
        s..s + self.m * self.k
    }
    pub fn omega(&self) -> std::ops::Range<usize> {
        let s = 2 * self.m + self.n_gamma + self.m * self.k;
        s..s + self.n_omega
    }
    pub fn len(&self) -> usize {
        self.omega().end
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VariationalParams {
    pub fn new(transforms: Vec<TransformParams>, scale: FactorScale, family: EllipticalFamily) -> Result<Self> {
        if transforms.len() != scale.m {
            return Err(Error::DimensionMismatch { expected: scale.m, found: transforms.len() });
        }
        for t in &transforms {
            if t.gamma_raw.len() != t.kind.n_shape() {
                return Err(Error::DimensionMismatch { expected: t.kind.n_shape(), found: t.gamma_raw.len() });
            }
        }
        if family.omega_raw.len() != family.n_omega() {
            return Err(Error::DimensionMismatch { expected: family.n_omega(), found: family.omega_raw.len() });
        }
        Ok(VariationalParams { transforms, scale, family })
    }

    /// Default starting point: `mu = 0`, `sigma = init_sigma`, identity-like
    /// shape, factor angles from [`FactorScale::init`] and the family's
    /// default parameter.
    pub fn init<R: Rng + ?Sized>(
        m: usize,
        k: usize,
        kind: TransformKind,
        family: FamilyKind,
        init_sigma: f64,
        rng: &mut R,
    ) -> Self {
        let transforms = (0..m)
            .map(|_| TransformParams { kind, gamma_raw: kind.identity_raw(), mu: 0.0, log_sigma: init_sigma.ln() })
            .collect();
        VariationalParams {
            transforms,
            scale: FactorScale::init(m, k, rng),
            family: EllipticalFamily::default_for(family),
        }
    }

    pub fn m(&self) -> usize {
        self.transforms.len()
    }

    pub fn k(&self) -> usize {
        self.scale.k
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            m: self.m(),
            k: self.k(),
            n_gamma: self.transforms.iter().map(|t| t.gamma_raw.len()).sum(),
            n_omega: self.family.omega_raw.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len()
    }

    /// `(mu, log sigma, gamma_raw blocks, tau row-major, omega_raw)`.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.transforms.iter().map(|t| t.mu));
        v.extend(self.transforms.iter().map(|t| t.log_sigma));
        for t in &self.transforms {
            v.extend_from_slice(&t.gamma_raw);
        }
        v.extend_from_slice(&self.scale.tau);
        v.extend_from_slice(&self.family.omega_raw);
        DVector::from_vec(v)
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` for the structure.
    pub fn unflatten(&self, flat: &DVector<f64>) -> Result<Self> {
        let lay = self.layout();
        if flat.len() != lay.len() {
            return Err(Error::DimensionMismatch { expected: lay.len(), found: flat.len() });
        }
        let mut out = self.clone();
        let mut g = lay.gamma().start;
        for (i, t) in out.transforms.iter_mut().enumerate() {
            t.mu = flat[i];
            t.log_sigma = flat[lay.m + i];
            for r in t.gamma_raw.iter_mut() {
                *r = flat[g];
                g += 1;
            }
        }
        out.scale.tau.copy_from_slice(&flat.as_slice()[lay.tau()]);
        out.family.omega_raw.copy_from_slice(&flat.as_slice()[lay.omega()]);
        Ok(out)
    }

    /// Precompute `B`, `d`, the Woodbury factorization and the shapes.
    pub fn prepare(&self) -> Result<PreparedParams<'_>> {
        PreparedParams::new(self)
    }

    pub fn sample(&self, base: &BaseDraw) -> Result<SampleRecord> {
        self.prepare()?.sample(base)
    }

    pub fn log_q(&self, theta: &DVector<f64>) -> Result<f64> {
        self.prepare()?.log_q(theta)
    }

    /// Log density of the `i`-th marginal of `q`.
    pub fn marginal_log_q(&self, theta_i: f64, i: usize) -> Result<f64> {
        let t = &self.transforms[i];
        let x = (theta_i - t.mu) / t.sigma();
        let shape = t.shape();
        let psi = shape.forward(x)?;
        let (d1, _) = shape.derivs_with_image(x, psi);
        Ok(marginal_log_density(psi, &self.family)? + d1.ln() - t.log_sigma)
    }
}

/// Base randomness of one draw: `z` (length K), `eps` (length m) and `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDraw {
    pub z: DVector<f64>,
    pub eps: DVector<f64>,
    pub u: f64,
}

impl BaseDraw {
    pub fn draw<R: RngCore + ?Sized>(m: usize, k: usize, rng: &mut R) -> Self {
        let z = DVector::from_fn(k, |_, _| rng.sample(StandardNormal));
        let eps = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
        BaseDraw { z, eps, u: open_uniform(rng) }
    }
}

/// Uniform on the open interval `(0, 1)`.
pub fn open_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub base: BaseDraw,
    pub w: f64,
    pub psi: DVector<f64>,
    pub theta: DVector<f64>,
}

/// `d theta / d lambda` at one draw in structured form: the `mu` block is
/// the identity, the `log sigma`, `gamma` and `tau` blocks are row-local,
/// and the `omega` block (if present) is a single column.
#[derive(Debug, Clone)]
pub struct ThetaJacobian {
    pub layout: ParamLayout,
    pub d_log_sigma: DVector<f64>,
    /// Per coordinate, derivatives with respect to its raw shape values.
    pub d_gamma: Vec<Vec<f64>>,
    /// `m x K`; entry `(j, l)` is `d theta_j / d tau_{j,l}`.
    pub d_tau: DMatrix<f64>,
    pub d_omega: Option<DVector<f64>>,
}

impl ThetaJacobian {
    /// `J' g`, i.e. a flattened gradient over lambda.
    pub fn transpose_apply(&self, g: &DVector<f64>) -> DVector<f64> {
        let lay = self.layout;
        let mut out = DVector::zeros(lay.len());
        let mut gi = lay.gamma().start;
        for i in 0..lay.m {
            out[i] = g[i];
            out[lay.m + i] = g[i] * self.d_log_sigma[i];
            for &dg in &self.d_gamma[i] {
                out[gi] = g[i] * dg;
                gi += 1;
            }
        }
        let t0 = lay.tau().start;
        for j in 0..lay.m {
            for l in 0..lay.k {
                out[t0 + j * lay.k + l] = g[j] * self.d_tau[(j, l)];
            }
        }
        if let Some(d_omega) = &self.d_omega {
            out[lay.omega().start] = g.dot(d_omega);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let lay = self.layout;
        let mut jac = DMatrix::zeros(lay.m, lay.len());
        let mut unit = DVector::zeros(lay.m);
        for i in 0..lay.m {
            unit[i] = 1.0;
            jac.set_row(i, &self.transpose_apply(&unit).transpose());
            unit[i] = 0.0;
        }
        jac
    }
}

/// Per-parameter-vector work shared by sampling, density and gradients.
#[derive(Debug, Clone)]
pub struct PreparedParams<'a> {
    pub lambda: &'a VariationalParams,
    pub b: DMatrix<f64>,
    pub d: DVector<f64>,
    pub solver: ScaleSolver,
    shapes: Vec<Shape>,
    sigmas: DVector<f64>,
}

impl<'a> PreparedParams<'a> {
    pub fn new(lambda: &'a VariationalParams) -> Result<Self> {
        let (b, d) = lambda.scale.build_b_d();
        let solver = ScaleSolver::new(&b, &d)?;
        let shapes = lambda.transforms.iter().map(|t| t.shape()).collect();
        let sigmas = DVector::from_iterator(lambda.m(), lambda.transforms.iter().map(|t| t.sigma()));
        Ok(PreparedParams { lambda, b, d, solver, shapes, sigmas })
    }

    fn check_base(&self, base: &BaseDraw) -> Result<()> {
        let (m, k) = (self.lambda.m(), self.lambda.k());
        if base.eps.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: base.eps.len() });
        }
        if base.z.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: base.z.len() });
        }
        Ok(())
    }

    /// `B z + D eps`, before scaling by `sqrt(w)`.
    fn gaussian_part(&self, base: &BaseDraw) -> DVector<f64> {
        &self.b * &base.z + self.d.component_mul(&base.eps)
    }

    pub fn sample(&self, base: &BaseDraw) -> Result<SampleRecord> {
        self.check_base(base)?;
        let w = w_quantile(base.u, &self.lambda.family)?;
        let psi = self.gaussian_part(base) * w.sqrt();
        let mut theta = DVector::zeros(psi.len());
        for (i, t) in self.lambda.transforms.iter().enumerate() {
            theta[i] = t.mu + self.sigmas[i] * self.shapes[i].inverse(psi[i])?;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled theta"));
        }
        Ok(SampleRecord { base: base.clone(), w, psi, theta })
    }

    fn log_q_parts(&self, xs: &[f64], psi: &DVector<f64>) -> Result<f64> {
        let m = psi.len();
        let quad = psi.dot(&self.solver.solve(psi)).max(0.0);
        let mut lq = -0.5 * self.solver.log_det() + log_gtilde(quad, m, &self.lambda.family)?;
        for i in 0..m {
            let (d1, _) = self.shapes[i].derivs_with_image(xs[i], psi[i]);
            lq += d1.ln() - self.lambda.transforms[i].log_sigma;
        }
        if lq.is_nan() {
            return Err(Error::NonFinite("log q"));
        }
        Ok(lq)
    }

    pub fn log_q(&self, theta: &DVector<f64>) -> Result<f64> {
        let m = self.lambda.m();
        if theta.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: theta.len() });
        }
        let mut xs = vec![0.0; m];
        let mut psi = DVector::zeros(m);
        for i in 0..m {
            let t = &self.lambda.transforms[i];
            xs[i] = (theta[i] - t.mu) / self.sigmas[i];
            psi[i] = self.shapes[i].forward(xs[i])?;
        }
        self.log_q_parts(&xs, &psi)
    }

    /// `log q` at a sampled point, reusing its `psi`.
    pub fn log_q_record(&self, rec: &SampleRecord) -> Result<f64> {
        let xs = self.standardized(rec);
        self.log_q_parts(&xs, &rec.psi)
    }

    fn standardized(&self, rec: &SampleRecord) -> Vec<f64> {
        self.lambda
            .transforms
            .iter()
            .enumerate()
            .map(|(i, t)| (rec.theta[i] - t.mu) / self.sigmas[i])
            .collect()
    }

    /// `grad_theta log q` at a sampled point.
    pub fn grad_theta_log_q(&self, rec: &SampleRecord) -> Result<DVector<f64>> {
        let m = self.lambda.m();
        let xs = self.standardized(rec);
        let v = self.solver.solve(&rec.psi);
        let quad = rec.psi.dot(&v).max(0.0);
        let ratio = gtilde_log_ratio(quad, m, &self.lambda.family)?;
        let mut g = DVector::zeros(m);
        for i in 0..m {
            let (d1, d2) = self.shapes[i].derivs_with_image(xs[i], rec.psi[i]);
            g[i] = (2.0 * ratio * v[i] * d1 + d2 / d1) / self.sigmas[i];
        }
        Ok(g)
    }

    pub fn dtheta_dlambda(&self, rec: &SampleRecord) -> Result<ThetaJacobian> {
        let lam = self.lambda;
        let lay = lam.layout();
        let m = lay.m;
        let mut d_log_sigma = DVector::zeros(m);
        let mut d_gamma = Vec::with_capacity(m);
        let mut dtheta_dpsi = DVector::zeros(m);
        for (i, t) in lam.transforms.iter().enumerate() {
            let x = (rec.theta[i] - t.mu) / self.sigmas[i];
            d_log_sigma[i] = self.sigmas[i] * x;
            let (dpsi, dgam) = self.shapes[i].inverse_param_grads(rec.psi[i])?;
            dtheta_dpsi[i] = self.sigmas[i] * dpsi;
            let chain = t.shape_chain();
            d_gamma.push(dgam.iter().zip(&chain).map(|(g, c)| self.sigmas[i] * g * c).collect());
        }
        let mut d_tau = dpsi_dtau(&rec.base.z, &rec.base.eps, rec.w, &lam.scale);
        for j in 0..m {
            for l in 0..lay.k {
                d_tau[(j, l)] *= dtheta_dpsi[j];
            }
        }
        let d_omega = match lam.family.kind {
            FamilyKind::StudentT => {
                let nu = lam.family.omega_raw[0].exp();
                let dw = w_quantile_domega(rec.base.u, &lam.family)? * nu;
                let scale = dw / (2.0 * rec.w.sqrt());
                Some(self.gaussian_part(&rec.base).component_mul(&dtheta_dpsi) * scale)
            }
            FamilyKind::ExpPower => {
                return Err(Error::UnsupportedFamily { family: lam.family.name(), operation: "sampling" })
            }
            FamilyKind::Gaussian | FamilyKind::Laplace => None,
        };
        Ok(ThetaJacobian { layout: lay, d_log_sigma, d_gamma, d_tau, d_omega })
    }

    /// Single-draw re-parameterization gradient together with the matching
    /// ELBO estimate `log g(theta) - log q(theta)`.
    pub fn reparam_grad_and_elbo<T: TargetModel + ?Sized>(
        &self,
        base: &BaseDraw,
        target: &T,
    ) -> Result<(DVector<f64>, f64)> {
        if target.dim() != self.lambda.m() {
            return Err(Error::DimensionMismatch { expected: self.lambda.m(), found: target.dim() });
        }
        let rec = self.sample(base)?;
        let (lg, gg) = target.log_density_and_grad(&rec.theta)?;
        let lq = self.log_q_record(&rec)?;
        let gq = self.grad_theta_log_q(&rec)?;
        let jac = self.dtheta_dlambda(&rec)?;
        Ok((jac.transpose_apply(&(gg - gq)), lg - lq))
    }

    pub fn elbo_estimate<T: TargetModel + ?Sized>(&self, base: &BaseDraw, target: &T) -> Result<f64> {
        let rec = self.sample(base)?;
        Ok(target.log_density(&rec.theta)? - self.log_q_record(&rec)?)
    }
}

pub fn reparam_grad<T: TargetModel + ?Sized>(
    base: &BaseDraw,
    lambda: &VariationalParams,
    target: &T,
) -> Result<DVector<f64>> {
    Ok(lambda.prepare()?.reparam_grad_and_elbo(base, target)?.0)
}

pub fn elbo_estimate<T: TargetModel + ?Sized>(base: &BaseDraw, lambda: &VariationalParams, target: &T) -> Result<f64> {
    lambda.prepare()?.elbo_estimate(base, target)
}

/// `q` itself wrapped as a target, handy for exactness checks.
pub struct VaAsTarget<'a>(pub &'a VariationalParams);

impl TargetModel for VaAsTarget<'_> {
    fn dim(&self) -> usize {
        self.0.m()
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        self.0.log_q(theta)
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        // through a synthetic record at theta
        let prep = self.0.prepare()?;
        let mut psi = DVector::zeros(theta.len());
        for (i, t) in self.0.transforms.iter().enumerate() {
            psi[i] = t.k_forward(theta[i])?;
        }
        let rec = SampleRecord {
            base: BaseDraw { z: DVector::zeros(self.0.k()), eps: DVector::zeros(theta.len()), u: 0.5 },
            w: 1.0,
            psi,
            theta: theta.clone(),
        };
        prep.grad_theta_log_q(&rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{central_gradient, central_jacobian};
    use crate::numerics::{integrate_real_line, LN_SQRT_2PI};
    use crate::targets::GaussianTarget;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_va(mu: Vec<f64>, sigma: f64, k: usize, family: EllipticalFamily, tau: Vec<f64>) -> VariationalParams {
        let m = mu.len();
        let transforms = mu.into_iter().map(|c| TransformParams::identity(c, sigma)).collect();
        VariationalParams::new(transforms, FactorScale::new(m, k, tau).unwrap(), family).unwrap()
    }

    /// Random VA with `|d_j|` bounded away from zero.
    pub(crate) fn random_va(rng: &mut ChaCha8Rng, m: usize, k: usize, kind: TransformKind, family: EllipticalFamily) -> VariationalParams {
        loop {
            let transforms = (0..m)
                .map(|_| {
                    let gamma_raw = match kind {
                        TransformKind::Identity => vec![],
                        TransformKind::YeoJohnson => vec![rng.random_range(-1.5..1.5)],
                        TransformKind::DoubleYeoJohnson => vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                        TransformKind::InverseGh => vec![rng.random_range(-0.5..0.5), rng.random_range(-4.0..-1.0)],
                    };
                    TransformParams { kind, gamma_raw, mu: rng.random_range(-2.0..2.0), log_sigma: rng.random_range(-1.0..1.0) }
                })
                .collect();
            let tau = (0..m * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let va = VariationalParams::new(transforms, FactorScale::new(m, k, tau).unwrap(), family.clone()).unwrap();
            let (_, d) = va.scale.build_b_d();
            if d.iter().all(|x| x.abs() > 0.1) {
                return va;
            }
        }
    }

    #[test]
    fn sample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let va = identity_va(vec![0.0; 3], 1.0, 2, EllipticalFamily::gaussian(), vec![0.3, -0.2, 1.0, 0.4, -1.1, 0.7]);
        let base = BaseDraw::draw(3, 2, &mut rng);
        let rec = va.sample(&base).unwrap();
        let (b, d) = va.scale.build_b_d();
        let expect = &b * &base.z + d.component_mul(&base.eps);
        assert!((rec.theta - expect).norm() < 1e-15);

        let va = identity_va(vec![2.5, -1.0], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
        let base = BaseDraw::draw(2, 0, &mut rng);
        let rec = va.sample(&base).unwrap();
        assert_eq!(rec.theta, DVector::from_vec(vec![2.5, -1.0]) + &base.eps);

        let va = identity_va(vec![0.0; 2], 1.0, 1, EllipticalFamily::student_t(4.0), vec![-0.8, 0.5]);
        let base = BaseDraw { z: DVector::zeros(1), eps: DVector::from_vec(vec![1.0, 0.0]), u: 0.5 };
        let rec = va.sample(&base).unwrap();
        let (_, d) = va.scale.build_b_d();
        let w = w_quantile(0.5, &EllipticalFamily::student_t(4.0)).unwrap();
        assert_relative_eq!(rec.theta[0], w.sqrt() * d[0], epsilon = 1e-15);
    }

    #[test]
    fn log_q_examples() {
        let va = identity_va(vec![0.0], 2.0, 0, EllipticalFamily::gaussian(), vec![]);
        assert_relative_eq!(va.log_q(&DVector::from_vec(vec![0.0])).unwrap(), -LN_SQRT_2PI - 2f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(va.log_q(&DVector::from_vec(vec![0.0])).unwrap(), -1.61209, epsilon = 1e-5);

        let va = identity_va(vec![0.0; 2], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
        let th = DVector::from_vec(vec![0.7, -1.3]);
        assert_relative_eq!(va.log_q(&th).unwrap(), -2.0 * LN_SQRT_2PI - 0.5 * th.norm_squared(), epsilon = 1e-14);
    }

    #[test]
    fn marginal_examples() {
        let va = identity_va(vec![1.0, 3.0], 2.0, 1, EllipticalFamily::gaussian(), vec![-1.0, 0.4]);
        assert_relative_eq!(va.marginal_log_q(3.0, 1).unwrap(), -LN_SQRT_2PI - 2f64.ln(), epsilon = 1e-14);

        let t = TransformParams::yeo_johnson(1.4, 0.3, 1.5);
        let va = VariationalParams::new(vec![t], FactorScale::new(1, 0, vec![]).unwrap(), EllipticalFamily::student_t(7.0)).unwrap();
        let total = integrate_real_line(|x| va.marginal_log_q(x, 0).unwrap().exp(), 0.3, 1.5, 1e-12);
        assert!((total - 1.0).abs() < 1e-8, "{total}");

        // density transport under location/scale
        let base = TransformParams::yeo_johnson(0.6, 0.0, 1.0);
        let moved = TransformParams::yeo_johnson(0.6, -4.0, 3.0);
        let mk = |t: TransformParams| {
            VariationalParams::new(vec![t], FactorScale::new(1, 0, vec![]).unwrap(), EllipticalFamily::laplace()).unwrap()
        };
        let (va0, va1) = (mk(base), mk(moved));
        for &th in &[-9.0, -4.0, 0.5, 6.0] {
            let lhs = va1.marginal_log_q(th, 0).unwrap();
            let rhs = va0.marginal_log_q((th + 4.0) / 3.0, 0).unwrap() - 3f64.ln();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let va = random_va(&mut rng, 4, 2, TransformKind::InverseGh, EllipticalFamily::student_t(6.0));
        let flat = va.flatten();
        assert_eq!(flat.len(), 4 + 4 + 8 + 8 + 1);
        assert_eq!(va.unflatten(&flat).unwrap(), va);
        let lay = va.layout();
        assert_eq!(flat[lay.omega().start], 6f64.ln());
        assert_eq!(flat[lay.mu().start], va.transforms[0].mu);
        assert_eq!(flat[lay.tau().start + 3], va.scale.tau[3]);
    }

    #[test]
    fn score_examples() {
        let va = identity_va(vec![0.0], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
        let g = VaAsTarget(&va).grad_log_density(&DVector::from_vec(vec![1.7])).unwrap();
        assert_relative_eq!(g[0], -1.7, epsilon = 1e-15);

        // multivariate t score with identity scale
        let nu = 5.0;
        let va = identity_va(vec![0.0; 3], 1.0, 0, EllipticalFamily::student_t(nu), vec![]);
        let th = DVector::from_vec(vec![0.5, -1.2, 2.0]);
        let g = VaAsTarget(&va).grad_log_density(&th).unwrap();
        let expect = &th * (-(nu + 3.0) / nu / (1.0 + th.norm_squared() / nu));
        assert!((g - expect).norm() < 1e-13);
    }

    fn families() -> Vec<EllipticalFamily> {
        vec![EllipticalFamily::gaussian(), EllipticalFamily::student_t(4.5), EllipticalFamily::laplace()]
    }

    const KINDS: [TransformKind; 4] =
        [TransformKind::Identity, TransformKind::YeoJohnson, TransformKind::InverseGh, TransformKind::DoubleYeoJohnson];

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut configs = 0;
        while configs < 204 {
            let m = rng.random_range(1..=8);
            let k = rng.random_range(0..=3);
            let fam = families()[configs % 3].clone();
            let kind = KINDS[(configs / 3) % 4];
            let va = random_va(&mut rng, m, k, kind, fam);
            let prep = va.prepare().unwrap();
            let rec = prep.sample(&BaseDraw::draw(m, k, &mut rng)).unwrap();
            let g = prep.grad_theta_log_q(&rec).unwrap();
            let fd = central_gradient(|th| prep.log_q(th).unwrap(), &rec.theta, 1e-6);
            for i in 0..m {
                let err = (g[i] - fd[i]).abs() / g[i].abs().max(1e-2);
                assert!(err < 1e-6, "config {configs} ({kind:?}, {:?}) coord {i}: {} vs {}", va.family.kind, g[i], fd[i]);
            }
            configs += 1;
        }
    }

    #[test]
    fn jacobian_blocks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for cfg in 0..120 {
            let m = rng.random_range(1..=6);
            let k = rng.random_range(0..=3);
            let fam = families()[cfg % 3].clone();
            let kind = KINDS[(cfg / 3) % 4];
            let va = random_va(&mut rng, m, k, kind, fam);
            let base = BaseDraw::draw(m, k, &mut rng);
            let rec = va.sample(&base).unwrap();
            let jac = va.prepare().unwrap().dtheta_dlambda(&rec).unwrap().to_dense();
            let fd = central_jacobian(|l| va.unflatten(l).unwrap().sample(&base).unwrap().theta, &va.flatten(), 1e-6);
            for (a, b) in jac.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-2), "cfg {cfg} {kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_jacobian_and_gaussian_omega() {
        let va = identity_va(vec![0.5, -0.5], 1.0, 1, EllipticalFamily::gaussian(), vec![-0.9, 0.3]);
        let rec = va.sample(&BaseDraw { z: DVector::from_vec(vec![0.4]), eps: DVector::from_vec(vec![1.0, -2.0]), u: 0.3 }).unwrap();
        let jac = va.prepare().unwrap().dtheta_dlambda(&rec).unwrap();
        for i in 0..2 {
            assert_relative_eq!(jac.d_log_sigma[i], rec.psi[i], epsilon = 1e-15);
            assert!(jac.d_gamma[i].is_empty());
        }
        assert!(jac.d_omega.is_none());
    }

    #[test]
    fn reparam_examples() {
        let target = GaussianTarget::standard(DVector::zeros(1));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &mu in &[0.0, 0.8, -2.3] {
            let va = identity_va(vec![mu], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
            for _ in 0..20 {
                let g = reparam_grad(&BaseDraw::draw(1, 0, &mut rng), &va, &target).unwrap();
                assert_relative_eq!(g[0], -mu, epsilon = 1e-12);
            }
        }
        let target = GaussianTarget::standard(DVector::from_vec(vec![1.5, -0.5]));
        let va = identity_va(vec![1.5, -0.5], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
        for _ in 0..20 {
            let base = BaseDraw::draw(2, 0, &mut rng);
            let g = reparam_grad(&base, &va, &target).unwrap();
            assert!(g.rows(0, 2).iter().all(|x| x.abs() < 1e-12));
            assert!(elbo_estimate(&base, &va, &target).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let va = random_va(&mut rng, 3, 2, TransformKind::YeoJohnson, EllipticalFamily::student_t(5.0));
        let me = VaAsTarget(&va);
        for _ in 0..50 {
            assert!(elbo_estimate(&BaseDraw::draw(3, 2, &mut rng), &va, &me).unwrap().abs() < 1e-12);
        }

        let target = GaussianTarget::standard(DVector::zeros(1));
        let mu = 0.7;
        let va = identity_va(vec![mu], 1.0, 0, EllipticalFamily::gaussian(), vec![]);
        let n = 100_000;
        let vals: Vec<f64> = (0..n).map(|_| elbo_estimate(&BaseDraw::draw(1, 0, &mut rng), &va, &target).unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean + 0.5 * mu * mu).abs() < 4.0 * sd / (n as f64).sqrt());

        let va = random_va(&mut rng, 5, 3, TransformKind::DoubleYeoJohnson, EllipticalFamily::laplace());
        let target = GaussianTarget::standard(DVector::zeros(5));
        for _ in 0..1000 {
            assert!(elbo_estimate(&BaseDraw::draw(5, 3, &mut rng), &va, &target).unwrap().is_finite());
        }
    }

    #[test]
    fn deterministic_given_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let va = random_va(&mut rng, 4, 2, TransformKind::InverseGh, EllipticalFamily::student_t(3.0));
        let base = BaseDraw::draw(4, 2, &mut rng);
        let target = GaussianTarget::standard(DVector::zeros(4));
        let a = va.prepare().unwrap().reparam_grad_and_elbo(&base, &target).unwrap();
        let b = va.prepare().unwrap().reparam_grad_and_elbo(&base, &target).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    /// Average of single-draw gradients against a finite difference of the
    /// exact ELBO on a bivariate Gaussian toy (closed-form KL).
    #[test]
    fn averaged_gradient_matches_elbo_derivative() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let mean = DVector::from_vec(vec![0.3, -0.4]);
        let target = GaussianTarget::new(mean.clone(), cov.clone()).unwrap();
        let va = identity_va(vec![0.1, 0.2], 1.2, 1, EllipticalFamily::gaussian(), vec![-0.4, 0.6]);
        // exact ELBO = -KL(q || p) for Gaussian q = N(mu, S) with S = diag(s) Sigma diag(s)
        let exact_elbo = |lam: &DVector<f64>| -> f64 {
            let v = va.unflatten(lam).unwrap();
            let sigma = v.scale.dense_sigma();
            let s = DVector::from_iterator(2, v.transforms.iter().map(|t| t.sigma()));
            let cov_q = DMatrix::from_diagonal(&s) * sigma * DMatrix::from_diagonal(&s);
            let mu_q = DVector::from_iterator(2, v.transforms.iter().map(|t| t.mu));
            let inv_p = cov.clone().try_inverse().unwrap();
            let diff = &mean - &mu_q;
            let kl = 0.5
                * ((&inv_p * &cov_q).trace() + diff.dot(&(&inv_p * &diff)) - 2.0
                    + cov.determinant().ln()
                    - cov_q.determinant().ln());
            -kl
        };
        let fd = central_gradient(exact_elbo, &va.flatten(), 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let prep = va.prepare().unwrap();
        let n = 100_000;
        let p = va.n_params();
        let mut sum = DVector::zeros(p);
        let mut sumsq = DVector::zeros(p);
        for _ in 0..n {
            let (g, _) = prep.reparam_grad_and_elbo(&BaseDraw::draw(2, 1, &mut rng), &target).unwrap();
            sumsq += g.component_mul(&g);
            sum += g;
        }
        for i in 0..p {
            let mean_g = sum[i] / n as f64;
            let se = ((sumsq[i] / n as f64 - mean_g * mean_g) / n as f64).sqrt();
            assert!((mean_g - fd[i]).abs() < 3.0 * se + 1e-9, "param {i}: {mean_g} vs {} (se {se})", fd[i]);
        }
    }

    /// Tensor-grid integral of `q` in two dimensions.
    fn grid_mass(va: &VariationalParams) -> f64 {
        let prep = va.prepare().unwrap();
        let (lo, hi, n) = (-60.0, 60.0, 1200);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                let th = DVector::from_vec(vec![lo + h * i as f64, lo + h * j as f64]);
                let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                total += wi * wj * prep.log_q(&th).unwrap().exp();
            }
        }
        total * h * h
    }

    #[test]
    fn joint_density_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut va = random_va(&mut rng, 2, 1, TransformKind::YeoJohnson, EllipticalFamily::student_t(5.0));
        for (t, g) in va.transforms.iter_mut().zip([0.8, 1.2]) {
            *t = TransformParams::yeo_johnson(g, 0.0, 1.0);
        }
        let mass = grid_mass(&va);
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }
}
