//! Scalar special functions and quadrature used across the crate.
//!
//! Gamma-family functions and `erfc_inv` come from `statrs`, `erfc` from
//! `libm`. The pieces built here are the ones with accuracy or range
//! requirements those libraries do not cover: a log-domain modified Bessel function of the
//! second kind for large orders, a Newton-polished chi-squared quantile, and
//! Gauss-Legendre / adaptive Gauss-Kronrod quadrature.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// `ln(sqrt(2 pi))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn std_normal_ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Phi(x)`, accurate far into the lower tail.
pub fn std_normal_ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        std_normal_cdf(x).ln()
    } else {
        // Mills-ratio asymptotic series.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        std_normal_ln_pdf(x) - (-x).ln() + series.ln()
    }
}

/// `phi(x) / Phi(x)`, stable for very negative `x`.
pub fn inverse_mills(x: f64) -> f64 {
    if x > -30.0 {
        std_normal_pdf(x) / std_normal_cdf(x)
    } else {
        (std_normal_ln_pdf(x) - std_normal_ln_cdf(x)).exp()
    }
}

/// Standard normal quantile. `p` must lie in `(0, 1)`.
pub fn std_normal_quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // one Halley step against the tail that is smaller
    let (r, dens) = if x <= 0.0 {
        (std_normal_cdf(x) - p, std_normal_pdf(x))
    } else {
        ((1.0 - p) - std_normal_cdf(-x), std_normal_pdf(x))
    };
    if dens == 0.0 {
        return x;
    }
    let t = r / std_normal_pdf(x);
    x - t / (1.0 + 0.5 * x * t)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn ln_gamma_fn(x: f64) -> f64 {
    ln_gamma(x)
}

// ---------------------------------------------------------------------------
// Modified Bessel function of the second kind
// ---------------------------------------------------------------------------

const BESSEL_EPS: f64 = 1e-16;
const DEBYE_ORDER: f64 = 50.0;

fn chebev(c: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &cj in c[1..].iter().rev() {
        let sv = d;
        d = y2 * d - dd + cj;
        dd = sv;
    }
    x * d - dd + 0.5 * c[0]
}

/// Temme's auxiliary gamma functions for `|mu| <= 1/2`:
/// `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    const C1: [f64; 7] = [
        -1.142_022_680_371_168e0,
        6.516_511_267_073_7e-3,
        3.087_090_173_086e-4,
        -3.470_626_964_9e-6,
        6.943_766_4e-9,
        3.677_95e-11,
        -1.356e-13,
    ];
    const C2: [f64; 8] = [
        1.843_740_587_300_905e0,
        -7.685_284_084_478_67e-2,
        1.271_927_136_654_6e-3,
        -4.971_736_704_2e-6,
        -3.312_611_98e-8,
        2.423_096e-10,
        -1.702e-13,
        -1.49e-15,
    ];
    let xx = 8.0 * mu * mu - 1.0;
    let gam1 = chebev(&C1, xx);
    let gam2 = chebev(&C2, xx);
    (gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1)
}

/// `(ln K_mu(x), K_{mu+1}(x) / K_mu(x))` for `|mu| <= 1/2`.
fn bessel_k_fractional(mu: f64, x: f64) -> Result<(f64, f64)> {
    let mu2 = mu * mu;
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < BESSEL_EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < BESSEL_EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        let mut converged = false;
        for i in 1..10_000 {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * BESSEL_EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence { what: "bessel K series", iterations: 10_000 });
        }
        let k_mu = sum;
        let k_mu1 = sum1 * 2.0 / x;
        Ok((k_mu.ln(), k_mu1 / k_mu))
    } else {
        // Steed's continued fraction CF2 (Temme's normalization).
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        let mut converged = false;
        for i in 1..10_000 {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < BESSEL_EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence { what: "bessel K continued fraction", iterations: 10_000 });
        }
        h *= a1;
        let ln_k = 0.5 * (PI / (2.0 * x)).ln() - x - s.ln();
        let ratio = (mu + x + 0.5 - h) / x;
        Ok((ln_k, ratio))
    }
}

/// Uniform asymptotic (Debye) expansion of `ln K_nu(x)` for large `nu`.
fn ln_bessel_k_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let sq = (1.0 + z * z).sqrt();
    let eta = sq + (z / (1.0 + sq)).ln();
    let p = 1.0 / sq;
    let p2 = p * p;
    let u1 = p * (3.0 - 5.0 * p2) / 24.0;
    let u2 = p2 * (81.0 - 462.0 * p2 + 385.0 * p2 * p2) / 1152.0;
    let u3 = p * p2 * (30375.0 - 369_603.0 * p2 + 765_765.0 * p2 * p2 - 425_425.0 * p2 * p2 * p2)
        / 414_720.0;
    let p4 = p2 * p2;
    let u4 = p4
        * (4_465_125.0 - 94_121_676.0 * p2 + 349_922_430.0 * p4 - 446_185_740.0 * p4 * p2
            + 185_910_725.0 * p4 * p4)
        / 39_813_120.0;
    let inv = 1.0 / nu;
    let series = 1.0 - u1 * inv + u2 * inv * inv - u3 * inv.powi(3) + u4 * inv.powi(4);
    0.5 * (PI / (2.0 * nu)).ln() - nu * eta - 0.25 * (1.0 + z * z).ln() + series.ln()
}

/// `ln K_nu(x)` together with `K_{|nu|+1}(x) / K_{|nu|}(x)`, for real `nu`
/// and `x > 0`. Evaluated entirely in the log domain.
pub fn ln_bessel_k_with_ratio(nu: f64, x: f64) -> Result<(f64, f64)> {
    if !(x > 0.0) || !x.is_finite() || !nu.is_finite() {
        return Err(Error::Domain(format!("bessel K requires finite x > 0, got nu={nu}, x={x}")));
    }
    let nu = nu.abs();
    if nu > DEBYE_ORDER {
        let lk = ln_bessel_k_debye(nu, x);
        let lk1 = ln_bessel_k_debye(nu + 1.0, x);
        return Ok((lk, (lk1 - lk).exp()));
    }
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut ln_k, mut ratio) = bessel_k_fractional(mu, x)?;
    // K_{v+1} = K_{v-1} + (2v/x) K_v, carried as successive ratios.
    for i in 1..=(nl as usize) {
        ln_k += ratio.ln();
        ratio = 2.0 * (mu + i as f64) / x + 1.0 / ratio;
    }
    Ok((ln_k, ratio))
}

pub fn ln_bessel_k(nu: f64, x: f64) -> Result<f64> {
    ln_bessel_k_with_ratio(nu, x).map(|(lk, _)| lk)
}

// ---------------------------------------------------------------------------
// Chi-squared quantile
// ---------------------------------------------------------------------------

/// Quantile of the chi-squared distribution with `dof` degrees of freedom,
/// i.e. the inverse of the regularized lower incomplete gamma function
/// `P(dof/2, x/2) = p`. Newton iterations on whichever tail is smaller, with a
/// bisection safeguard; relative accuracy ~1e-13.
pub fn chi_squared_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("chi-squared quantile needs p in (0,1), got {p}")));
    }
    if !(dof > 0.0) || !dof.is_finite() {
        return Err(Error::Domain(format!("chi-squared dof must be positive, got {dof}")));
    }
    let a = 0.5 * dof;
    let upper = p > 0.5;
    let target = if upper { 1.0 - p } else { p };
    // Residual in the tail that is being matched; increasing in x for the
    // lower tail, decreasing for the upper tail.
    let resid = |x: f64| -> f64 {
        if upper {
            target - gamma_ur(a, 0.5 * x)
        } else {
            gamma_lr(a, 0.5 * x) - target
        }
    };
    let ln_norm = ln_gamma(a) + a * 2f64.ln();
    let density = |x: f64| -> f64 { ((a - 1.0) * x.ln() - 0.5 * x - ln_norm).exp() };

    // Wilson-Hilferty starting point.
    let z = std_normal_quantile(p);
    let h = 2.0 / (9.0 * dof);
    let mut x = dof * (1.0 - h + z * h.sqrt()).powi(3);
    if !(x > 0.0) || !x.is_finite() {
        x = (p * a * (ln_gamma(a)).exp()).powf(1.0 / a) * 2.0;
        if !(x > 0.0) || !x.is_finite() {
            x = dof.max(1e-3);
        }
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..300 {
        let r = resid(x);
        if r == 0.0 {
            return Ok(x);
        }
        if r > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let dens = density(x);
        let mut next = x - r / dens;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1e-300) };
        }
        if ((next - x) / x).abs() < 1e-14 {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::NoConvergence { what: "chi-squared quantile", iterations: 300 })
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j as f64 + 1.0) * z * p2 - j as f64 * p3) / (j as f64 + 1.0);
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        kronrod += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += G7_WEIGHTS[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) integration of `f` over `[a, b]` to absolute
/// tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut stack = vec![(a, b, tol, 0usize)];
    let mut total = 0.0;
    while let Some((lo, hi, t, depth)) = stack.pop() {
        let (val, err) = gk15(&f, lo, hi);
        if err <= t.max(1e-300) || depth >= 50 {
            total += val;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * t, depth + 1));
            stack.push((mid, hi, 0.5 * t, depth + 1));
        }
    }
    total
}

/// Integral of `f` over the whole real line, via the substitution
/// `x = center + scale * u / (1 - u^2)` on `u in (-1, 1)`.
pub fn integrate_real_line<F: Fn(f64) -> f64>(f: F, center: f64, scale: f64, tol: f64) -> f64 {
    integrate(
        |u| {
            let d = 1.0 - u * u;
            if d <= 0.0 {
                return 0.0;
            }
            let x = center + scale * u / d;
            let jac = scale * (1.0 + u * u) / (d * d);
            let v = f(x) * jac;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        -1.0,
        1.0,
        tol,
    )
}
