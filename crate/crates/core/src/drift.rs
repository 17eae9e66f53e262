//! Conservative estimation of the per-step drift `ρ` of the optimal
//! parameters, and of the curvature constants `m` and `L_b`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::models::{random_unit_vector, LikelihoodModel, ParamDomain, ParamVec};
use crate::sampling::{weighted_empirical_loss, LabeledBatch};

/// Tuning of the drift estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    /// Window size `W` of the scaled-max combiner.
    pub window: usize,
    /// Scale of `r_t`, in squared parameter units; `None` means
    /// `Diameter(Θ)²`, the least value of the per-term deviation range
    /// `(L_b/m)·Diameter²` of the correction, since `L_b ≥ m`.
    pub r0: Option<f64>,
    /// Multiplier applied to each one-step curvature estimate.
    pub m_safety: f64,
    /// Random perturbations added to the candidate set.
    pub perturbations: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            window: 3,
            r0: None,
            m_safety: 0.5,
            perturbations: 8,
        }
    }
}

/// The drift estimate after a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoEstimate {
    /// One-step estimate, sign preserved.
    pub rho_tilde_sq: f64,
    /// Window-combined estimate, floored at zero.
    pub rho_acute_sq: f64,
    pub d_t: f64,
    pub r_t: f64,
    pub rho_hat: f64,
}

/// What the estimator needs to know about one step.
#[derive(Clone, Copy, Debug)]
pub struct StepView<'a> {
    pub batch: &'a LabeledBatch,
    pub theta_hat: &'a ParamVec,
    pub pool_size: usize,
}

/// `(1/m̂)[L̂_t(θ̂_{t−1}) − L̂_t(θ̂_t) + L̂_{t−1}(θ̂_t) − L̂_{t−1}(θ̂_{t−1})]`.
pub fn one_step_rho_sq<M: LikelihoodModel + ?Sized>(
    model: &M,
    prev: StepView<'_>,
    curr: StepView<'_>,
    m_hat: f64,
) -> f64 {
    assert!(m_hat > 0.0, "curvature estimate must be positive");
    let now = |theta| weighted_empirical_loss(model, curr.batch, theta, curr.pool_size);
    let before = |theta| weighted_empirical_loss(model, prev.batch, theta, prev.pool_size);
    let gap = now(prev.theta_hat) - now(curr.theta_hat) + before(curr.theta_hat) - before(prev.theta_hat);
    gap / m_hat
}

/// `h_n(v) = ((n+1)/n) · max v` for the `n` entries of `v`.
pub fn h_w(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "h_W of an empty window");
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (n + 1.0) / n * max
}

/// `r_t = r0 (t−1)^{−1/4}`.
pub fn r_schedule(t: usize, r0: f64) -> f64 {
    assert!(t >= 2, "r_t is defined for t >= 2");
    r0 * ((t - 1) as f64).powf(-0.25)
}

/// The computable stand-in for the almost-sure correction `D_t`.
///
/// `traces[i]` and `ks[i]` are the mixture trace ratio and sample size at
/// step `i + 1`; the loss range over `Θ` is bounded by `(L̂_b/2) Diameter²`.
pub fn correction_d(traces: &[f64], ks: &[usize], diameter: f64, lb_hat: f64, m_hat: f64) -> f64 {
    assert_eq!(traces.len(), ks.len(), "trace and budget histories differ in length");
    let t = traces.len();
    assert!(t >= 2, "correction needs at least two steps");
    assert!(m_hat > 0.0, "curvature estimate must be positive");
    let g = 0.5 * lb_hat * diameter * diameter;
    let k = |i: usize| ks[i - 1] as f64;
    let tr = |i: usize| traces[i - 1];
    let sq = |i: usize| (2.0 * tr(i) / k(i) + (g / k(i)).powi(2)).sqrt();
    let c = |i: usize| tr(i) / k(i) + g / k(i).powi(2);

    // √A_i uses step i−1 and √B_i step i.
    let u_v: f64 = (2..=t).map(|i| sq(i - 1) + sq(i)).sum();
    let w = c(1) + 2.0 * (2..t).map(c).sum::<f64>() + c(t);
    (u_v + w) / (m_hat * (t - 1) as f64)
}

/// `ρ̂ = √(ρ́² + D_t + r_t)`.
pub fn rho_hat(rho_tilde_sq: f64, rho_acute_sq: f64, d_t: f64, r_t: f64) -> RhoEstimate {
    RhoEstimate {
        rho_tilde_sq,
        rho_acute_sq,
        d_t,
        r_t,
        rho_hat: (rho_acute_sq + d_t + r_t).sqrt(),
    }
}

/// Importance-weighted Bregman-gap quotient, minimized over candidate pairs.
pub fn estimate_m<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &LabeledBatch,
    pool_size: usize,
    pairs: &[(ParamVec, ParamVec)],
) -> Result<f64> {
    let k = batch.len() as f64;
    // The quotient is linear in per-point sums, so each distinct point is
    // evaluated once.
    let mut cache: Vec<(ParamVec, f64, ParamVec)> = Vec::new();
    let mut sums = |theta: &ParamVec| -> (f64, ParamVec) {
        if let Some((_, l, g)) = cache.iter().find(|(p, _, _)| p == theta) {
            return (*l, g.clone());
        }
        let (l, g) = weighted_sums(model, batch, pool_size, theta);
        cache.push((theta.clone(), l, g.clone()));
        (l, g)
    };
    let mut best: Option<f64> = None;
    for (a, b) in pairs {
        let diff = a.as_vector() - b.as_vector();
        let dist_sq = diff.norm_squared();
        if dist_sq == 0.0 {
            continue;
        }
        let (la, _) = sums(a);
        let (lb, gb) = sums(b);
        let q = 2.0 * (la - lb - gb.dot(&diff)) / (k * dist_sq);
        best = Some(best.map_or(q, |v: f64| v.min(q)));
    }
    best.ok_or_else(|| Error::invalid("every candidate pair is coincident"))
}

/// `Σ_k ℓ_k(θ)/(N p_k)` and `Σ_k ∇ℓ_k(θ)/(N p_k)`.
fn weighted_sums<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &LabeledBatch,
    pool_size: usize,
    theta: &ParamVec,
) -> (f64, ParamVec) {
    let n = pool_size as f64;
    let mut loss = 0.0;
    let mut grad = ParamVec::zeros(theta.dim());
    for s in batch.samples() {
        let w = 1.0 / (n * s.sampling_prob);
        loss += w * model.loss(&s.x, s.y, theta);
        *grad += model.grad(&s.x, s.y, theta).as_vector() * w;
    }
    (loss, grad)
}

/// Largest eigenvalue of the importance-weighted Hessian average, maximized
/// over candidates.
pub fn estimate_lb<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &LabeledBatch,
    pool_size: usize,
    candidates: &[ParamVec],
) -> f64 {
    let n = pool_size as f64;
    let k = batch.len() as f64;
    candidates
        .iter()
        .map(|theta| {
            let d = theta.dim();
            let mut acc = DMatrix::zeros(d, d);
            for s in batch.samples() {
                acc += model.hessian(&s.x, theta).as_matrix() / (n * s.sampling_prob);
            }
            acc /= k;
            SymmetricEigen::new(acc).eigenvalues.max()
        })
        .fold(0.0, f64::max)
}

/// `{θ̂_{t−1}, θ̂_t}` plus random points at distance `radius` from `θ̂_t`, all
/// projected into the domain.
pub fn candidate_points(
    prev: Option<&ParamVec>,
    curr: &ParamVec,
    radius: f64,
    count: usize,
    domain: &ParamDomain,
    rng: &mut dyn RngCore,
) -> Vec<ParamVec> {
    let mut out = Vec::with_capacity(count + 2);
    out.extend(prev.cloned());
    out.push(curr.clone());
    for _ in 0..count {
        let u = random_unit_vector(curr.dim(), rng);
        out.push(domain.project(&ParamVec::new(curr.as_vector() + u * radius)));
    }
    out
}

/// All ordered pairs of distinct candidates.
pub fn candidate_pairs(points: &[ParamVec]) -> Vec<(ParamVec, ParamVec)> {
    let mut pairs = Vec::new();
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i != j && a != b {
                pairs.push((a.clone(), b.clone()));
            }
        }
    }
    pairs
}

/// Rolling state of the drift estimator for one session.
#[derive(Clone, Debug)]
pub struct DriftState {
    cfg: DriftConfig,
    window: VecDeque<f64>,
    running_sum: f64,
    terms: usize,
    steps_seen: usize,
    traces: Vec<f64>,
    ks: Vec<usize>,
    m_hat: Option<f64>,
    lb_hat: Option<f64>,
    last: Option<RhoEstimate>,
    prev: Option<(LabeledBatch, ParamVec, usize)>,
}

/// Per-step input to [`DriftState::observe`].
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub batch: &'a LabeledBatch,
    pub theta_hat: &'a ParamVec,
    pub pool_size: usize,
    /// Trace ratio of the sampling mixture at the reference point.
    pub trace_ratio: f64,
}

impl DriftState {
    pub fn new(cfg: DriftConfig) -> Result<Self> {
        if cfg.window == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        if !(cfg.m_safety > 0.0) {
            return Err(Error::invalid("curvature safety factor must be positive"));
        }
        if let Some(r0) = cfg.r0 {
            if !(r0 > 0.0) {
                return Err(Error::invalid(format!("r0 must be positive, got {r0}")));
            }
        }
        Ok(DriftState {
            cfg,
            window: VecDeque::new(),
            running_sum: 0.0,
            terms: 0,
            steps_seen: 0,
            traces: Vec::new(),
            ks: Vec::new(),
            m_hat: None,
            lb_hat: None,
            last: None,
            prev: None,
        })
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    pub fn m_hat(&self) -> Option<f64> {
        self.m_hat
    }

    pub fn lb_hat(&self) -> Option<f64> {
        self.lb_hat
    }

    pub fn last(&self) -> Option<RhoEstimate> {
        self.last
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// Pushes a one-step estimate and returns the updated `ρ́²`.
    pub fn window_combine(&mut self, rho_tilde_sq: f64) -> f64 {
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(rho_tilde_sq);
        self.running_sum += h_w(self.window.make_contiguous());
        self.terms += 1;
        (self.running_sum / self.terms as f64).max(0.0)
    }

    /// Folds in one step: updates `m̂` and `L̂_b` and, from the second step
    /// on, the drift estimate.
    pub fn observe<M: LikelihoodModel + ?Sized>(
        &mut self,
        model: &M,
        obs: Observation<'_>,
        domain: &ParamDomain,
        rng: &mut dyn RngCore,
    ) -> Result<Option<RhoEstimate>> {
        self.steps_seen += 1;
        let t = self.steps_seen;
        let radius = self.last.map_or(domain.radius(), |e| e.rho_hat);
        let prev_theta = self.prev.as_ref().map(|p| &p.1);
        let points = candidate_points(prev_theta, obs.theta_hat, radius, self.cfg.perturbations, domain, rng);

        let m_tilde = self.cfg.m_safety * estimate_m(model, obs.batch, obs.pool_size, &candidate_pairs(&points))?;
        let lb = estimate_lb(model, obs.batch, obs.pool_size, &points);
        let lb_hat = self.lb_hat.map_or(lb, |v| v.max(lb));
        let floor = f64::MIN_POSITIVE;
        let m_hat = self.m_hat.map_or(m_tilde, |v| v.min(m_tilde)).min(lb_hat).max(floor);
        self.lb_hat = Some(lb_hat);
        self.m_hat = Some(m_hat);
        self.traces.push(obs.trace_ratio);
        self.ks.push(obs.batch.len());

        let estimate = match self.prev.as_ref() {
            None => None,
            Some((prev_batch, prev_theta, prev_n)) => {
                let prev = StepView {
                    batch: prev_batch,
                    theta_hat: prev_theta,
                    pool_size: *prev_n,
                };
                let curr = StepView {
                    batch: obs.batch,
                    theta_hat: obs.theta_hat,
                    pool_size: obs.pool_size,
                };
                let tilde = one_step_rho_sq(model, prev, curr, m_hat);
                let acute = self.window_combine(tilde);
                let d_t = correction_d(&self.traces, &self.ks, domain.diameter(), lb_hat, m_hat);
                let r0 = self.cfg.r0.unwrap_or(domain.diameter().powi(2));
                Some(rho_hat(tilde, acute, d_t, r_schedule(t, r0)))
            }
        };
        if estimate.is_some() {
            self.last = estimate;
        }
        self.prev = Some((obs.batch.clone(), obs.theta_hat.clone(), obs.pool_size));
        Ok(estimate)
    }
}
