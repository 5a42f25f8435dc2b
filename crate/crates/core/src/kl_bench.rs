//! Optimal one-dimensional marginal approximations to skew-normal targets.
//!
//! Three families are compared: the location-scale adjusted marginal
//! `phi(t((x - mu)/sigma)) t'((x - mu)/sigma) / sigma`, the marginal with the
//! location and scale on the transformed scale
//! `phi((t(x) - mu)/sigma) t'(x) / sigma`, and a plain Gaussian. All use the
//! Yeo-Johnson transform. KL divergences are computed by Gauss-Legendre
//! quadrature over `mean +/- 10 sd` of the target and minimized numerically.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{gauss_legendre, integrate, inverse_mills, logistic, logit, std_normal_ln_pdf};
use crate::targets::skew_normal::{skew_to_alpha, SkewNormalTarget};
use crate::transforms::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarginalFamily {
    /// Location and scale applied to `theta` before the transform.
    Adjusted,
    /// Location and scale applied to `psi = t(theta)`.
    Sln2020,
    Gaussian,
}

impl MarginalFamily {
    pub const ALL: [MarginalFamily; 3] = [MarginalFamily::Adjusted, MarginalFamily::Sln2020, MarginalFamily::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            MarginalFamily::Adjusted => "adjusted",
            MarginalFamily::Sln2020 => "sln2020",
            MarginalFamily::Gaussian => "gaussian",
        }
    }

    pub fn n_params(self) -> usize {
        match self {
            MarginalFamily::Gaussian => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for MarginalFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarginalFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adjusted" => Ok(MarginalFamily::Adjusted),
            "sln2020" => Ok(MarginalFamily::Sln2020),
            "gaussian" => Ok(MarginalFamily::Gaussian),
            other => Err(Error::Domain(format!("unknown marginal family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(p || q)`.
    TargetToQ,
    /// `KL(q || p)`, the divergence variational inference minimizes.
    #[default]
    QToTarget,
}

impl KlDirection {
    pub fn name(self) -> &'static str {
        match self {
            KlDirection::TargetToQ => "target-to-q",
            KlDirection::QToTarget => "q-to-target",
        }
    }
}

impl FromStr for KlDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "target-to-q" | "pq" => Ok(KlDirection::TargetToQ),
            "q-to-target" | "qp" => Ok(KlDirection::QToTarget),
            other => Err(Error::Domain(format!("unknown KL direction '{other}'"))),
        }
    }
}

/// How the requested skewness is turned into a shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkewDefinition {
    /// Standardized third central moment.
    #[default]
    Moment,
    /// `(mean - mode) / sd`.
    Mode,
}

impl FromStr for SkewDefinition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "moment" => Ok(SkewDefinition::Moment),
            "mode" => Ok(SkewDefinition::Mode),
            other => Err(Error::Domain(format!("unknown skew definition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlBenchConfig {
    pub skew: f64,
    pub skew_definition: SkewDefinition,
    pub direction: KlDirection,
    pub nodes: usize,
    /// Half-width of the quadrature interval in target standard deviations.
    pub half_width: f64,
    pub starts: usize,
}

impl Default for KlBenchConfig {
    fn default() -> Self {
        KlBenchConfig {
            skew: 0.8553,
            skew_definition: SkewDefinition::Moment,
            direction: KlDirection::default(),
            nodes: 400,
            half_width: 10.0,
            starts: 5,
        }
    }
}

impl KlBenchConfig {
    pub fn alpha(&self) -> Result<f64> {
        match self.skew_definition {
            SkewDefinition::Moment => skew_to_alpha(self.skew),
            SkewDefinition::Mode => mode_skew_to_alpha(self.skew),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRow {
    pub family: MarginalFamily,
    pub mu: f64,
    pub sigma: f64,
    pub kl: f64,
    /// Unconstrained optimum: `(location, log scale[, gamma_raw])`.
    pub params: Vec<f64>,
    pub converged: bool,
}

impl KlRow {
    /// Yeo-Johnson `gamma` at the optimum, if the family has one.
    pub fn gamma(&self) -> Option<f64> {
        self.params.get(2).map(|&r| 2.0 * logistic(r))
    }
}

/// Log density of a marginal family with unconstrained parameters.
pub fn marginal_log_density(family: MarginalFamily, params: &[f64], theta: f64) -> f64 {
    let (loc, log_s) = (params[0], params[1]);
    let s = log_s.exp();
    match family {
        MarginalFamily::Gaussian => std_normal_ln_pdf((theta - loc) / s) - log_s,
        MarginalFamily::Adjusted => {
            let shape = Shape::Yj(2.0 * logistic(params[2]));
            let x = (theta - loc) / s;
            match shape.forward(x) {
                Ok(psi) => std_normal_ln_pdf(psi) + shape.derivs_with_image(x, psi).0.ln() - log_s,
                Err(_) => f64::NEG_INFINITY,
            }
        }
        MarginalFamily::Sln2020 => {
            let shape = Shape::Yj(2.0 * logistic(params[2]));
            match shape.forward(theta) {
                Ok(psi) => std_normal_ln_pdf((psi - loc) / s) - log_s + shape.derivs_with_image(theta, psi).0.ln(),
                Err(_) => f64::NEG_INFINITY,
            }
        }
    }
}

/// Quadrature rule on the target's `mean +/- half_width sd`, with the target
/// log density at every node and the target mass outside the interval.
struct Grid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_p: Vec<f64>,
    p: Vec<f64>,
    ln_mass_outside: f64,
}

impl Grid {
    fn new(target: &SkewNormalTarget, cfg: &KlBenchConfig) -> Self {
        let (m, sd) = (target.mean(), target.sd());
        let (a, b) = (m - cfg.half_width * sd, m + cfg.half_width * sd);
        let (x, w) = gauss_legendre(cfg.nodes);
        let half = 0.5 * (b - a);
        let nodes: Vec<f64> = x.iter().map(|t| a + half * (t + 1.0)).collect();
        let weights: Vec<f64> = w.iter().map(|w| w * half).collect();
        let log_p: Vec<f64> = nodes.iter().map(|&t| target.log_density(t)).collect();
        let p = log_p.iter().map(|l| l.exp()).collect();
        let dens = |t: f64| target.log_density(t).exp();
        let tail = 60.0 * target.omega;
        let outside = integrate(dens, a - tail, a, 1e-14) + integrate(dens, b, b + tail, 1e-14);
        Grid { nodes, weights, log_p, p, ln_mass_outside: outside.max(1e-300).ln() }
    }

    fn kl(&self, family: MarginalFamily, params: &[f64], direction: KlDirection) -> f64 {
        if params.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        let mut q_mass = 0.0;
        for i in 0..self.nodes.len() {
            let lq = marginal_log_density(family, params, self.nodes[i]);
            match direction {
                KlDirection::TargetToQ => {
                    if self.p[i] > 0.0 {
                        acc += self.weights[i] * self.p[i] * (self.log_p[i] - lq);
                    }
                }
                KlDirection::QToTarget => {
                    let q = lq.exp();
                    if q > 0.0 {
                        acc += self.weights[i] * q * (lq - self.log_p[i]);
                        q_mass += self.weights[i] * q;
                    }
                }
            }
        }
        if direction == KlDirection::QToTarget {
            // q mass the grid cannot see; the log-sum inequality bounds its
            // contribution from below by m ln(m / P_out).
            let leaked = 1.0 - q_mass;
            if leaked > 1e-12 {
                acc += leaked * (leaked.ln() - self.ln_mass_outside);
            }
        }
        if acc.is_finite() {
            acc
        } else {
            f64::INFINITY
        }
    }

    fn moments_under_p<F: Fn(f64) -> f64>(&self, f: F) -> (f64, f64) {
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..self.nodes.len() {
            let v = f(self.nodes[i]);
            let w = self.weights[i] * self.p[i];
            m1 += w * v;
            m2 += w * v * v;
        }
        (m1, (m2 - m1 * m1).max(1e-300).sqrt())
    }
}

const GAMMA_RAW_BOUNDARY: f64 = 20.0;

/// Minimize the KL divergence between the skew-normal target and `family`.
pub fn kl_optimal(target: &SkewNormalTarget, family: MarginalFamily, cfg: &KlBenchConfig) -> KlRow {
    let grid = Grid::new(target, cfg);
    let f = |p: &[f64]| grid.kl(family, p, cfg.direction);
    let starts = start_points(&grid, target, family, cfg.starts.max(1));
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for x0 in starts {
        let nm = nelder_mead(&f, &x0, 0.2, 4000, 1e-13);
        let polished = bfgs_polish(&f, &nm.x, 200);
        let (x, fx) = if polished.1 <= nm.fx { polished } else { (nm.x.clone(), nm.fx) };
        if best.as_ref().is_none_or(|b| fx < b.1) {
            best = Some((x, fx, nm.converged));
        }
    }
    let (x, kl, nm_ok) = best.expect("at least one start");
    let grad_small = fd_gradient(&f, &x).iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-4;
    // gamma pinned at 0 or 2 means the infimum is approached on the boundary
    let interior = x.get(2).is_none_or(|g| g.abs() < GAMMA_RAW_BOUNDARY);
    KlRow {
        family,
        mu: target.mean(),
        sigma: target.sd(),
        kl,
        params: x,
        converged: kl.is_finite() && interior && (nm_ok || grad_small),
    }
}

fn start_points(grid: &Grid, target: &SkewNormalTarget, family: MarginalFamily, n: usize) -> Vec<Vec<f64>> {
    let (m, sd) = (target.mean(), target.sd());
    let gammas: Vec<f64> = (0..n).map(|i| 2.0 * (i as f64 + 0.5) / n as f64).collect();
    match family {
        MarginalFamily::Gaussian => (0..n)
            .map(|i| {
                let shift = (i as f64 - (n - 1) as f64 / 2.0) * 0.1;
                vec![m + shift * sd, (sd * (1.0 + 0.5 * shift)).ln()]
            })
            .collect(),
        MarginalFamily::Adjusted => gammas.iter().map(|&g| vec![m, sd.ln(), logit(g / 2.0)]).collect(),
        MarginalFamily::Sln2020 => gammas
            .iter()
            .map(|&g| {
                let shape = Shape::Yj(g);
                let (pm, psd) = grid.moments_under_p(|t| shape.forward(t).unwrap_or(f64::NAN));
                vec![pm, psd.ln(), logit(g / 2.0)]
            })
            .collect(),
    }
}

/// One row per `(family, mu, sigma)`, in input order.
pub fn run_grid(
    mus: &[f64],
    sigmas: &[f64],
    families: &[MarginalFamily],
    cfg: &KlBenchConfig,
) -> Result<Vec<KlRow>> {
    let alpha = cfg.alpha()?;
    let mut jobs = Vec::new();
    for &fam in families {
        for &s in sigmas {
            for &m in mus {
                if !(s > 0.0) || !m.is_finite() {
                    return Err(Error::Domain(format!("invalid grid point mu={m}, sigma={s}")));
                }
                jobs.push((fam, m, s));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(fam, m, s)| {
            let target = SkewNormalTarget::from_mean_sd(m, s, alpha)?;
            let mut row = kl_optimal(&target, fam, cfg);
            row.mu = m;
            row.sigma = s;
            Ok(row)
        })
        .collect()
}

/// Shape whose `(mean - mode)/sd` equals `skew`.
pub fn mode_skew_to_alpha(skew: f64) -> Result<f64> {
    let limit = mode_skew(1e8);
    if !(skew.abs() < limit) {
        return Err(Error::Domain(format!("mode skewness {skew} outside (-{limit}, {limit})")));
    }
    if skew == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1e8_f64.ln());
    // bisection in log(1 + alpha)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mode_skew(mid.exp_m1()) < skew.abs() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(skew.signum() * (0.5 * (lo + hi)).exp_m1())
}

fn mode_skew(alpha: f64) -> f64 {
    let delta = alpha / (1.0 + alpha * alpha).sqrt();
    let b = (2.0 / std::f64::consts::PI).sqrt();
    let mean = b * delta;
    let sd = (1.0 - mean * mean).sqrt();
    // mode of the standardized density: root of -z + alpha * phi(az)/Phi(az)
    let score = |z: f64| -z + alpha * inverse_mills(alpha * z);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while score(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (mean - 0.5 * (lo + hi)) / sd
}

// --- Minimizers -------------------------------------------------------------

struct NmResult {
    x: Vec<f64>,
    fx: f64,
    converged: bool,
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, max_iter: usize, ftol: f64) -> NmResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = (vals[n] - vals[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= ftol * (1.0 + vals[0].abs()) && size < 1e-7 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    NmResult { x: simplex[best].clone(), fx: vals[best], converged }
}

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// BFGS with finite-difference gradients and backtracking line search.
fn bfgs_polish<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut g = fd_gradient(f, &x);
    let mut h = nalgebra::DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let gv = nalgebra::DVector::from_vec(g.clone());
        if gv.amax() < 1e-10 {
            break;
        }
        let mut d = -(&h * &gv);
        if d.dot(&gv) >= 0.0 {
            h = nalgebra::DMatrix::identity(n, n);
            d = -gv.clone();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * d.dot(&gv) {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = fd_gradient(f, &xn);
        let s = nalgebra::DVector::from_iterator(n, (0..n).map(|i| xn[i] - x[i]));
        let y = nalgebra::DVector::from_iterator(n, (0..n).map(|i| gn[i] - g[i]));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = nalgebra::DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * y.transpose();
            h = &a * &h * a.transpose() + rho * &s * s.transpose();
        }
        let done = (fx - fnew).abs() < 1e-16;
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            break;
        }
    }
    (x, fx)
}

/// Closed-form `KL(q || p)` between two normals, for checking the quadrature.
pub fn gaussian_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}
