//! Central finite differences, used to audit analytic derivatives.

use nalgebra::{DMatrix, DVector};

/// Step used for coordinate `x`: `rel * max(1, |x|)`.
#[inline]
pub fn step_for(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

pub fn central_derivative<F: FnMut(f64) -> f64>(mut f: F, x: f64, rel: f64) -> f64 {
    let h = step_for(x, rel);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn central_gradient<F: FnMut(&DVector<f64>) -> f64>(mut f: F, x: &DVector<f64>, rel: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step_for(x[i], rel);
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

/// Jacobian of a vector map, one column per input coordinate.
pub fn central_jacobian<F: FnMut(&DVector<f64>) -> DVector<f64>>(mut f: F, x: &DVector<f64>, rel: f64) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step_for(x[i], rel);
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        cols.push((up - dn) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Largest `|a - b| / max(|a|, floor)` over paired entries.
pub fn max_rel_error<'a, I>(pairs: I, floor: f64) -> f64
where
    I: IntoIterator<Item = (&'a f64, &'a f64)>,
{
    pairs
        .into_iter()
        .map(|(a, b)| (a - b).abs() / a.abs().max(floor))
        .fold(0.0, f64::max)
}
