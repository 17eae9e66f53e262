//! Variance-reduced MLE fitting, the excess-risk bound `b(τ², Δ, K)` and the
//! adaptive sample-size rule.

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::models::{LikelihoodModel, ParamDomain, ParamVec};
use crate::sampling::LabeledBatch;

/// Constants of `b(τ², Δ, K) = c1 τ²/K + c2 (Δ/K)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    pub c1: f64,
    pub c2: f64,
}

impl BoundParams {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) {
            return Err(Error::invalid(format!("bound constants must be positive, got c1={c1}, c2={c2}")));
        }
        Ok(BoundParams { c1, c2 })
    }
}

impl Default for BoundParams {
    fn default() -> Self {
        BoundParams { c1: 4.0, c2: 16.0 }
    }
}

/// `b(τ², Δ, K)`. Panics when `K = 0`.
pub fn bound_b(tau_sq: f64, delta: f64, k: usize, p: &BoundParams) -> f64 {
    assert!(k >= 1, "bound_b needs K >= 1");
    let k = k as f64;
    p.c1 * tau_sq / k + p.c2 * (delta / k).powi(2)
}

/// Smallest `K ≤ cap` with `b(d/2, Δ, K) ≤ ε`.
pub fn sample_size_for_delta(d: usize, eps: f64, delta: f64, p: &BoundParams, cap: usize) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be nonnegative, got {delta}")));
    }
    if cap == 0 {
        return Err(Error::invalid("sample size cap must be at least 1"));
    }
    let tau_sq = d as f64 / 2.0;
    let ok = |k: usize| bound_b(tau_sq, delta, k, p) <= eps;
    if !ok(cap) {
        return Err(Error::BudgetExhausted { cap });
    }
    // b is decreasing in K, so the feasible set is an interval ending at cap.
    let (mut lo, mut hi) = (0usize, cap);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `K* = min{K ≥ 1 | b(d/2, √(2ε/m̂) + ρ̂, K) ≤ ε}`.
pub fn select_sample_size(
    d: usize,
    eps: f64,
    m_hat: f64,
    rho_hat: f64,
    p: &BoundParams,
    cap: usize,
) -> Result<usize> {
    if !(m_hat > 0.0) {
        return Err(Error::invalid(format!("m_hat must be positive, got {m_hat}")));
    }
    if !(rho_hat >= 0.0) {
        return Err(Error::invalid(format!("rho_hat must be nonnegative, got {rho_hat}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    sample_size_for_delta(d, eps, (2.0 * eps / m_hat).sqrt() + rho_hat, p, cap)
}

/// The first-step budget, bounding the warm-start distance by the domain diameter.
pub fn bootstrap_sample_size(
    d: usize,
    eps: f64,
    domain: &ParamDomain,
    p: &BoundParams,
    cap: usize,
) -> Result<usize> {
    sample_size_for_delta(d, eps, domain.diameter(), p, cap)
}

/// How the SVRG step size is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `scale / L̂`, where `L̂` is supplied by the caller.
    InverseCurvature { scale: f64, curvature: f64 },
}

impl StepSize {
    fn value(self) -> Result<f64> {
        let v = match self {
            StepSize::Fixed(v) => v,
            StepSize::InverseCurvature { scale, curvature } => scale / curvature,
        };
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::invalid(format!("step size must be positive and finite, got {v}")))
        }
    }
}

/// SVRG schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub epochs: usize,
    /// Inner steps per epoch; `None` means one pass over the batch.
    pub inner_steps_per_epoch: Option<usize>,
    pub step_size: StepSize,
    /// Stop once the gradient-mapping norm falls below this.
    pub tol: f64,
    pub projection_domain: ParamDomain,
}

impl SolverConfig {
    pub fn new(domain: ParamDomain, step_size: StepSize) -> Self {
        SolverConfig {
            epochs: 50,
            inner_steps_per_epoch: None,
            step_size,
            tol: 1e-7,
            projection_domain: domain,
        }
    }
}

/// Output of [`fit_mle`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta_hat: ParamVec,
    pub initial_empirical_loss: f64,
    pub final_empirical_loss: f64,
    /// Norm of the projected-gradient mapping at `theta_hat`.
    pub gradient_norm: f64,
    pub epochs_run: usize,
}

struct Objective<'a, M: ?Sized> {
    model: &'a M,
    batch: &'a LabeledBatch,
}

impl<M: LikelihoodModel + ?Sized> Objective<'_, M> {
    fn loss(&self, theta: &ParamVec) -> Result<f64> {
        let s = self.batch.samples();
        let v = s.iter().map(|s| self.model.loss(&s.x, s.y, theta)).sum::<f64>() / s.len() as f64;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalDivergence { iterate: theta.clone() })
        }
    }

    fn grad(&self, theta: &ParamVec) -> Result<ParamVec> {
        let s = self.batch.samples();
        let mut g = ParamVec::zeros(theta.dim());
        for s in s {
            *g += self.model.grad(&s.x, s.y, theta).as_vector();
        }
        *g /= s.len() as f64;
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::NumericalDivergence { iterate: theta.clone() })
        }
    }

    fn sample_grad(&self, k: usize, theta: &ParamVec) -> ParamVec {
        let s = &self.batch.samples()[k];
        self.model.grad(&s.x, s.y, theta)
    }
}

fn gradient_mapping(domain: &ParamDomain, theta: &ParamVec, grad: &ParamVec, step: f64) -> f64 {
    let moved = ParamVec::new(theta.as_vector() - grad.as_vector() * step);
    domain.project(&moved).distance(theta) / step
}

/// Minimizes the batch mean loss by projected SVRG starting from `init`.
///
/// An epoch whose anchor loss exceeds the previous anchor's is discarded and
/// the step halved, so the returned loss never exceeds the loss at `init`.
pub fn fit_mle<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &LabeledBatch,
    init: &ParamVec,
    cfg: &SolverConfig,
    rng: &mut dyn RngCore,
) -> Result<FitResult> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot fit on an empty batch"));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("solver needs at least one epoch"));
    }
    let domain = &cfg.projection_domain;
    let mut step = cfg.step_size.value()?;
    let obj = Objective { model, batch };
    let inner = cfg.inner_steps_per_epoch.unwrap_or(batch.len()).max(1);

    let mut anchor = domain.project(init);
    let initial_loss = obj.loss(&anchor)?;
    let mut anchor_loss = initial_loss;
    let mut full = obj.grad(&anchor)?;
    let mut mapping = gradient_mapping(domain, &anchor, &full, step);
    let mut epochs_run = 0;

    while epochs_run < cfg.epochs && mapping > cfg.tol {
        epochs_run += 1;
        let mut theta = anchor.clone();
        for _ in 0..inner {
            let k = rng.random_range(0..batch.len());
            let g_theta = obj.sample_grad(k, &theta);
            let g_anchor = obj.sample_grad(k, &anchor);
            let dir = g_theta.as_vector() - g_anchor.as_vector() + full.as_vector();
            theta = domain.project(&ParamVec::new(theta.as_vector() - dir * step));
            if !theta.is_finite() {
                return Err(Error::NumericalDivergence { iterate: theta });
            }
        }
        let loss = obj.loss(&theta)?;
        if loss <= anchor_loss {
            anchor = theta;
            anchor_loss = loss;
            full = obj.grad(&anchor)?;
        } else {
            step *= 0.5;
        }
        mapping = gradient_mapping(domain, &anchor, &full, step);
    }

    Ok(FitResult {
        theta_hat: anchor,
        initial_empirical_loss: initial_loss,
        final_empirical_loss: anchor_loss,
        gradient_norm: mapping,
        epochs_run,
    })
}
