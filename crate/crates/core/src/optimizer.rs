//! Stochastic gradient ascent with element-wise adaptive step sizes.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copula_va::{BaseDraw, VariationalParams};
use crate::error::{Error, Result};
use crate::targets::TargetModel;

/// Trace window for [`lb_bar`].
pub const LB_WINDOW: usize = 500;
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum StepRule {
    Adadelta { rho: f64, eps: f64 },
    Adam { alpha: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn adadelta() -> Self {
        StepRule::Adadelta { rho: 0.95, eps: 1e-6 }
    }

    pub fn adam(alpha: f64) -> Self {
        StepRule::Adam { alpha, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepRule::Adadelta { rho, eps } => rho > 0.0 && rho < 1.0 && eps > 0.0,
            StepRule::Adam { alpha, beta1, beta2, eps } => {
                alpha > 0.0 && beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid step rule {self:?}")))
        }
    }
}

impl Default for StepRule {
    fn default() -> Self {
        Self::adadelta()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgaConfig {
    pub steps: usize,
    pub seed: u64,
    pub step_rule: StepRule,
    pub trace_every: usize,
}

impl Default for SgaConfig {
    fn default() -> Self {
        SgaConfig { steps: 15_000, seed: 0, step_rule: StepRule::default(), trace_every: 1 }
    }
}

/// Running moments of the chosen rule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    rule: StepRule,
    t: u64,
    acc1: DVector<f64>,
    acc2: DVector<f64>,
}

impl OptState {
    pub fn new(rule: StepRule, n: usize) -> Self {
        OptState { rule, t: 0, acc1: DVector::zeros(n), acc2: DVector::zeros(n) }
    }
}

/// One ascent step `lambda + delta o grad`. Errors on a non-finite gradient,
/// naming the first bad coordinate.
pub fn sga_step(lambda: &DVector<f64>, grad: &DVector<f64>, state: &mut OptState) -> Result<DVector<f64>> {
    if lambda.len() != grad.len() || state.acc1.len() != grad.len() {
        return Err(Error::DimensionMismatch { expected: lambda.len(), found: grad.len() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Domain(format!("non-finite gradient at coordinate {i}")));
    }
    state.t += 1;
    let mut out = lambda.clone();
    match state.rule {
        StepRule::Adadelta { rho, eps } => {
            for i in 0..grad.len() {
                let g = grad[i];
                state.acc1[i] = rho * state.acc1[i] + (1.0 - rho) * g * g;
                let delta = ((state.acc2[i] + eps).sqrt() / (state.acc1[i] + eps).sqrt()) * g;
                state.acc2[i] = rho * state.acc2[i] + (1.0 - rho) * delta * delta;
                out[i] += delta;
            }
        }
        StepRule::Adam { alpha, beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.t as i32);
            let c2 = 1.0 - beta2.powi(state.t as i32);
            for i in 0..grad.len() {
                let g = grad[i];
                state.acc1[i] = beta1 * state.acc1[i] + (1.0 - beta1) * g;
                state.acc2[i] = beta2 * state.acc2[i] + (1.0 - beta2) * g * g;
                out[i] += alpha * (state.acc1[i] / c1) / ((state.acc2[i] / c2).sqrt() + eps);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbBar {
    pub value: f64,
    /// Set when fewer than [`LB_WINDOW`] entries were available.
    pub short_trace: bool,
}

/// Median of the last 500 ELBO estimates (all of them if fewer).
pub fn lb_bar(trace: &[f64]) -> Result<LbBar> {
    if trace.is_empty() {
        return Err(Error::Domain("empty ELBO trace".into()));
    }
    let start = trace.len().saturating_sub(LB_WINDOW);
    Ok(LbBar { value: median(&trace[start..]), short_trace: trace.len() < LB_WINDOW })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub lambda_star: VariationalParams,
    /// `(step, elbo estimate)` for every `trace_every`-th step.
    pub trace: Vec<(usize, f64)>,
    /// `None` for a 0-step run.
    pub lb_bar: Option<LbBar>,
}

impl FitResult {
    pub fn elbo_values(&self) -> Vec<f64> {
        self.trace.iter().map(|&(_, e)| e).collect()
    }
}

pub fn run<T: TargetModel + ?Sized>(target: &T, lambda0: &VariationalParams, cfg: &SgaConfig) -> Result<FitResult> {
    run_with_sink(target, lambda0, cfg, |_, _| Ok(()))
}

/// As [`run`], also handing each recorded trace row to `sink`.
pub fn run_with_sink<T, F>(target: &T, lambda0: &VariationalParams, cfg: &SgaConfig, mut sink: F) -> Result<FitResult>
where
    T: TargetModel + ?Sized,
    F: FnMut(usize, f64) -> Result<()>,
{
    cfg.step_rule.validate()?;
    if cfg.trace_every == 0 {
        return Err(Error::Domain("trace_every must be positive".into()));
    }
    if target.dim() != lambda0.m() {
        return Err(Error::DimensionMismatch { expected: lambda0.m(), found: target.dim() });
    }
    let (m, k) = (lambda0.m(), lambda0.k());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lambda = lambda0.clone();
    let mut flat = lambda.flatten();
    let mut state = OptState::new(cfg.step_rule, flat.len());
    let mut trace = Vec::with_capacity(cfg.steps / cfg.trace_every + 1);
    let at = |step: usize| move |e: Error| Error::AtStep { step, source: Box::new(e) };

    for step in 1..=cfg.steps {
        let base = BaseDraw::draw(m, k, &mut rng);
        let (grad, elbo) = lambda.prepare().and_then(|p| p.reparam_grad_and_elbo(&base, target)).map_err(at(step))?;
        if !elbo.is_finite() || elbo.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step, reason: format!("ELBO estimate {elbo:e}") });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, reason: format!("non-finite gradient in {} block", block_name(&lambda, i)) });
        }
        if step % cfg.trace_every == 0 {
            trace.push((step, elbo));
            sink(step, elbo)?;
        }
        flat = sga_step(&flat, &grad, &mut state).map_err(at(step))?;
        lambda = lambda.unflatten(&flat)?;
    }
    let values: Vec<f64> = trace.iter().map(|&(_, e)| e).collect();
    let lb = if values.is_empty() { None } else { Some(lb_bar(&values)?) };
    Ok(FitResult { lambda_star: lambda, trace, lb_bar: lb })
}

fn block_name(lambda: &VariationalParams, i: usize) -> &'static str {
    let lay = lambda.layout();
    if lay.mu().contains(&i) {
        "mu"
    } else if lay.log_sigma().contains(&i) {
        "log sigma"
    } else if lay.gamma().contains(&i) {
        "gamma"
    } else if lay.tau().contains(&i) {
        "tau"
    } else {
        "omega"
    }
}
