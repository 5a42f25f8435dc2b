//! Posterior summaries of the correlation matrix under a fitted approximation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::copula_va::{BaseDraw, VariationalParams};
use crate::error::{Error, Result};
use crate::targets::corr::{n_pairs, pair_index, spearman_from_omega, CorrModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SpearmanSummary {
    pub r: usize,
    pub n_draws: usize,
    /// Posterior mean of the Spearman matrix.
    pub mean: DMatrix<f64>,
    pub probs: Vec<f64>,
    /// `quantiles[s][p]` for pair `s` (see [`pair_index`]) and level `probs[p]`.
    pub quantiles: Vec<Vec<f64>>,
}

impl SpearmanSummary {
    /// `(i, j)` with `j < i` for every pair, in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (1..self.r).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
    }
}

/// Draw `theta ~ q`, map each draw to its Spearman matrix and summarize.
/// Base draws are generated sequentially from `seed`, so the result does not
/// depend on the number of worker threads.
pub fn spearman_posterior(lambda: &VariationalParams, n_draws: usize, seed: u64, probs: &[f64]) -> Result<SpearmanSummary> {
    if n_draws == 0 {
        return Err(Error::Domain("need at least one draw".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("quantile level {p} outside [0, 1]")));
    }
    let r = CorrModelParams::r_for_dim(lambda.m())?;
    let (m, k) = (lambda.m(), lambda.k());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<BaseDraw> = (0..n_draws).map(|_| BaseDraw::draw(m, k, &mut rng)).collect();
    let prepared = lambda.prepare()?;
    let draws: Vec<Vec<f64>> = bases
        .par_iter()
        .map(|b| {
            let theta = prepared.sample(b)?.theta;
            spearman_pairs(&theta, r)
        })
        .collect::<Result<_>>()?;

    let np = n_pairs(r);
    let mut mean = DMatrix::identity(r, r);
    let mut quantiles = Vec::with_capacity(np);
    for i in 1..r {
        for j in 0..i {
            let s = pair_index(i, j);
            let mut col: Vec<f64> = draws.iter().map(|d| d[s]).collect();
            // summed in draw order for reproducibility
            let avg = col.iter().sum::<f64>() / n_draws as f64;
            mean[(i, j)] = avg;
            mean[(j, i)] = avg;
            col.sort_by(|a, b| a.total_cmp(b));
            quantiles.push(probs.iter().map(|&p| quantile_sorted(&col, p)).collect());
        }
    }
    Ok(SpearmanSummary { r, n_draws, mean, probs: probs.to_vec(), quantiles })
}

/// Strict lower triangle of the Spearman matrix implied by `theta`.
pub fn spearman_pairs(theta: &DVector<f64>, r: usize) -> Result<Vec<f64>> {
    let omega = CorrModelParams::from_theta(theta.as_slice(), r)?.omega()?;
    let sp = spearman_from_omega(&omega.map(|v| v.clamp(-1.0, 1.0)))?;
    Ok((1..r).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| sp[(i, j)]).collect())
}

/// Linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
