//! One tracking run: the per-step loop and the comparison policies.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::drift::{estimate_lb, DriftConfig, DriftState, Observation, RhoEstimate};
use crate::error::{Error, Result};
use crate::fisher_design::{
    optimize_design_atoms, pool_hessians, replace_reference, trace_ratio_of, weighted_fisher, DesignConfig,
    SamplePool, SimplexDist,
};
use crate::models::{LikelihoodModel, ParamDomain, ParamVec};
use crate::sampling::{
    draw_top_k, draw_with_replacement, mix, query_labels, weighted_empirical_loss, LabelSource,
};
use crate::solver::{fit_mle, sample_size_for_delta, BoundParams, SolverConfig, StepSize};

/// Sampling and reference policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    ActiveAdaptive,
    PassiveAdaptive,
    ActiveRandom,
    PassiveRandom,
    AllUpFront,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::ActiveAdaptive,
        Policy::PassiveAdaptive,
        Policy::ActiveRandom,
        Policy::PassiveRandom,
        Policy::AllUpFront,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::ActiveAdaptive => "active-adaptive",
            Policy::PassiveAdaptive => "passive-adaptive",
            Policy::ActiveRandom => "active-random",
            Policy::PassiveRandom => "passive-random",
            Policy::AllUpFront => "all-up-front",
        }
    }

    /// Uses the trace-ratio design rather than uniform sampling.
    pub fn is_active(self) -> bool {
        matches!(self, Policy::ActiveAdaptive | Policy::ActiveRandom | Policy::AllUpFront)
    }

    /// Replaces the previous estimate by a random point of the domain.
    pub fn is_random(self) -> bool {
        matches!(self, Policy::ActiveRandom | Policy::PassiveRandom)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Policy::ALL
            .into_iter()
            .find(|p| p.name().replace('-', "") == key)
            .ok_or_else(|| Error::invalid(format!("unknown policy {s:?}")))
    }
}

/// How labels are queried from the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    WithReplacement,
    /// The `K` largest mixture weights, each queried once.
    TopK,
}

/// Settings shared by every step of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub eps: f64,
    pub alpha: f64,
    pub bound: BoundParams,
    pub domain: ParamDomain,
    pub sampling: SamplingMode,
    /// Largest admissible budget; `None` means `10 N`.
    pub k_cap: Option<usize>,
    pub horizon: usize,
    pub seed: u64,
    pub design: DesignConfig,
    pub drift: DriftConfig,
    pub solver_epochs: usize,
    pub solver_tol: f64,
    /// SVRG step is `step_scale / L̂_b`.
    pub step_scale: f64,
    /// Fit on even-indexed samples and estimate drift on odd-indexed ones.
    pub sample_splitting: bool,
}

impl SessionConfig {
    pub fn new(domain: ParamDomain, eps: f64, horizon: usize, seed: u64) -> Self {
        SessionConfig {
            eps,
            alpha: 0.9,
            bound: BoundParams::default(),
            domain,
            sampling: SamplingMode::WithReplacement,
            k_cap: None,
            horizon,
            seed,
            design: DesignConfig::default(),
            drift: DriftConfig::default(),
            solver_epochs: 100,
            solver_tol: 1e-6,
            step_scale: 0.1,
            sample_splitting: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.k_cap == Some(0) {
            return Err(Error::invalid("K cap must be at least 1"));
        }
        if self.solver_epochs == 0 || !(self.step_scale > 0.0) {
            return Err(Error::invalid("solver needs epochs >= 1 and a positive step scale"));
        }
        BoundParams::new(self.bound.c1, self.bound.c2)?;
        Ok(())
    }

    fn cap(&self, pool_size: usize) -> usize {
        let cap = self.k_cap.unwrap_or(10 * pool_size);
        match self.sampling {
            SamplingMode::WithReplacement => cap,
            SamplingMode::TopK => cap.min(pool_size),
        }
    }
}

/// What happened at one step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub t: usize,
    /// Labels queried at this step; zero once an up-front policy is frozen.
    pub k: usize,
    pub theta_hat: ParamVec,
    pub rho: Option<RhoEstimate>,
    pub m_hat: Option<f64>,
    pub lb_hat: Option<f64>,
    /// Trace ratio of the optimized design (`d` for uniform).
    pub design_objective: f64,
    /// Trace ratio of the sampling mixture actually used.
    pub mixture_trace: f64,
    pub design_fallback: bool,
    /// Oracle excess risk on the pool, when the truth is known.
    pub excess_risk: Option<f64>,
    /// Expected misclassification rate on the pool, for binary models.
    pub classification_error: Option<f64>,
    /// Importance-weighted empirical loss of the estimate on this step's batch.
    pub weighted_risk: Option<f64>,
    pub fit_initial_loss: Option<f64>,
    pub fit_final_loss: Option<f64>,
    pub wall_time: Duration,
}

impl StepReport {
    pub fn rho_hat(&self) -> Option<f64> {
        self.rho.map(|r| r.rho_hat)
    }
}

/// Pool-uniform expected loss gap `L_U(θ̂) − L_U(θ*)`.
pub fn oracle_excess_risk<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    theta_hat: &ParamVec,
    theta_star: &ParamVec,
) -> f64 {
    let total: f64 = pool
        .features()
        .iter()
        .map(|x| model.expected_loss(x, theta_hat, theta_star) - model.expected_loss(x, theta_star, theta_star))
        .sum();
    total / pool.len() as f64
}

/// Pool-uniform expected misclassification rate, when the model defines one.
pub fn oracle_classification_error<M: LikelihoodModel + ?Sized>(
    model: &M,
    pool: &SamplePool,
    theta_hat: &ParamVec,
    theta_star: &ParamVec,
) -> Option<f64> {
    let mut total = 0.0;
    for x in pool.features() {
        total += model.expected_error(x, theta_hat, theta_star)?;
    }
    Some(total / pool.len() as f64)
}

// Independent random streams so that policies sharing a seed see the same
// world randomness wherever their choices coincide.
const STREAM_SAMPLING: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SOLVER: u64 = 4;
const STREAM_CANDIDATES: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The sequential state of one policy.
pub struct Session<'m, M: LikelihoodModel + ?Sized> {
    model: &'m M,
    policy: Policy,
    cfg: SessionConfig,
    t: usize,
    theta_hat: Option<ParamVec>,
    drift: DriftState,
    upfront_budget: Option<usize>,
    rng_sampling: ChaCha8Rng,
    rng_reference: ChaCha8Rng,
    rng_init: ChaCha8Rng,
    rng_solver: ChaCha8Rng,
    rng_candidates: ChaCha8Rng,
}

impl<'m, M: LikelihoodModel + ?Sized> Session<'m, M> {
    pub fn new(model: &'m M, policy: Policy, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.domain.dim() != model.dim() {
            return Err(Error::SizeMismatch {
                expected: model.dim(),
                actual: cfg.domain.dim(),
            });
        }
        let seed = cfg.seed;
        Ok(Session {
            model,
            policy,
            drift: DriftState::new(cfg.drift.clone())?,
            cfg,
            t: 0,
            theta_hat: None,
            upfront_budget: None,
            rng_sampling: stream(seed, STREAM_SAMPLING),
            rng_reference: stream(seed, STREAM_REFERENCE),
            rng_init: stream(seed, STREAM_INIT),
            rng_solver: stream(seed, STREAM_SOLVER),
            rng_candidates: stream(seed, STREAM_CANDIDATES),
        })
    }

    /// Sets the total budget an up-front policy spends at its first step.
    pub fn set_upfront_budget(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("up-front budget must be at least 1"));
        }
        self.upfront_budget = Some(k);
        Ok(())
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn theta_hat(&self) -> Option<&ParamVec> {
        self.theta_hat.as_ref()
    }

    pub fn drift(&self) -> &DriftState {
        &self.drift
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    fn sample_size(&self, pool_size: usize) -> Result<usize> {
        let d = self.model.dim();
        let cap = self.cfg.cap(pool_size);
        let diam = self.cfg.domain.diameter();
        let delta = match (self.drift.last(), self.drift.m_hat()) {
            // The warm-start distance can never exceed the domain diameter.
            (Some(rho), Some(m_hat)) => ((2.0 * self.cfg.eps / m_hat).sqrt() + rho.rho_hat).min(diam),
            _ => diam,
        };
        sample_size_for_delta(d, self.cfg.eps, delta, &self.cfg.bound, cap)
    }

    /// Runs one step on `pool`; `truth` enables the oracle metrics.
    pub fn step(
        &mut self,
        pool: &SamplePool,
        labels: &mut dyn LabelSource,
        truth: Option<&ParamVec>,
    ) -> Result<StepReport> {
        let started = Instant::now();
        let model = self.model;
        let d = model.dim();
        if pool.feature_dim() != d {
            return Err(Error::SizeMismatch {
                expected: d,
                actual: pool.feature_dim(),
            });
        }
        self.t += 1;
        let t = self.t;
        let n = pool.len();

        if self.policy == Policy::AllUpFront && t >= 2 {
            let theta = self.theta_hat.clone().expect("up-front policy fitted at its first step");
            return Ok(self.report(t, 0, theta, pool, truth, None, (f64::NAN, f64::NAN, false), None, started));
        }

        // Reference point for the design.
        let reference = if self.policy.is_random() {
            self.cfg.domain.sample_uniform(&mut self.rng_reference)
        } else {
            replace_reference(self.theta_hat.as_ref(), &self.cfg.domain)
        };

        // Design.
        let atoms = pool_hessians(model, pool, &reference);
        let mut fallback = false;
        let (design, objective) = if self.policy.is_active() {
            match optimize_design_atoms(&atoms, &self.cfg.design) {
                Ok(sol) => (sol.dist, sol.objective),
                Err(e) => {
                    log::warn!("step {t}: design solve failed ({e}); sampling uniformly");
                    fallback = true;
                    (SimplexDist::uniform(n), d as f64)
                }
            }
        } else {
            (SimplexDist::uniform(n), d as f64)
        };
        let mixture = mix(&design, self.cfg.alpha)?;
        let mixture_trace = mixture_trace_ratio(&atoms, mixture.weights()).unwrap_or(d as f64);

        // Budget.
        let k = match (self.policy, self.upfront_budget) {
            (Policy::AllUpFront, Some(k)) => match self.cfg.sampling {
                SamplingMode::TopK if k > n => {
                    log::warn!("up-front budget {k} exceeds the pool; querying all {n} items");
                    n
                }
                _ => k,
            },
            _ => self.sample_size(n)?,
        };

        // Draw and label.
        let replacement = self.cfg.sampling == SamplingMode::WithReplacement;
        let indices = if replacement {
            draw_with_replacement(&mixture, k, &mut self.rng_sampling)?
        } else {
            draw_top_k(&mixture, k)?
        };
        let batch = query_labels(pool, &mixture, &indices, replacement, labels)?;
        let (fit_batch, eval_batch) = if self.cfg.sample_splitting {
            match (batch.split_half(0), batch.split_half(1)) {
                (Some(a), Some(b)) => (a, b),
                _ => (batch.clone(), batch.clone()),
            }
        } else {
            (batch.clone(), batch.clone())
        };

        // Fit.
        let init = if self.policy.is_random() {
            self.cfg.domain.sample_uniform(&mut self.rng_init)
        } else {
            self.theta_hat.clone().unwrap_or_else(|| self.cfg.domain.center().clone())
        };
        let curvature = match self.drift.lb_hat() {
            Some(lb) if lb > 0.0 => lb,
            _ => {
                let lb = estimate_lb(model, &fit_batch, n, std::slice::from_ref(&init));
                if lb > 0.0 {
                    lb
                } else {
                    1.0
                }
            }
        };
        let mut solver = SolverConfig::new(
            self.cfg.domain.clone(),
            StepSize::InverseCurvature {
                scale: self.cfg.step_scale,
                curvature,
            },
        );
        solver.epochs = self.cfg.solver_epochs;
        solver.tol = self.cfg.solver_tol;
        let fit = fit_mle(model, &fit_batch, &init, &solver, &mut self.rng_solver)?;
        let theta_hat = fit.theta_hat.clone();

        // Drift, curvature and smoothness estimates.
        let rho = self.drift.observe(
            model,
            Observation {
                batch: &eval_batch,
                theta_hat: &theta_hat,
                pool_size: n,
                trace_ratio: mixture_trace,
            },
            &self.cfg.domain,
            &mut self.rng_candidates,
        )?;
        self.theta_hat = Some(theta_hat.clone());

        let weighted = weighted_empirical_loss(model, &batch, &theta_hat, n);
        let mut report = self.report(
            t,
            k,
            theta_hat,
            pool,
            truth,
            rho,
            (objective, mixture_trace, fallback),
            Some(weighted),
            started,
        );
        report.fit_initial_loss = Some(fit.initial_empirical_loss);
        report.fit_final_loss = Some(fit.final_empirical_loss);
        report.wall_time = started.elapsed();
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        t: usize,
        k: usize,
        theta_hat: ParamVec,
        pool: &SamplePool,
        truth: Option<&ParamVec>,
        rho: Option<RhoEstimate>,
        design: (f64, f64, bool),
        weighted_risk: Option<f64>,
        started: Instant,
    ) -> StepReport {
        let excess_risk = truth.map(|ts| oracle_excess_risk(self.model, pool, &theta_hat, ts));
        let classification_error = truth.and_then(|ts| oracle_classification_error(self.model, pool, &theta_hat, ts));
        StepReport {
            t,
            k,
            theta_hat,
            rho,
            m_hat: self.drift.m_hat(),
            lb_hat: self.drift.lb_hat(),
            design_objective: design.0,
            mixture_trace: design.1,
            design_fallback: design.2,
            excess_risk,
            classification_error,
            weighted_risk,
            fit_initial_loss: None,
            fit_final_loss: None,
            wall_time: started.elapsed(),
        }
    }
}

fn mixture_trace_ratio(atoms: &[crate::fisher_design::FisherMatrix], weights: &SimplexDist) -> Option<f64> {
    let d = atoms.first()?.dim();
    let info = weighted_fisher(atoms, weights.weights()).ok()?;
    let uniform = weighted_fisher(atoms, SimplexDist::uniform(atoms.len()).weights()).ok()?;
    let ridge = 1e-8 * uniform.trace() / d as f64;
    trace_ratio_of(&info, &uniform, ridge).ok()
}

/// One step of `session`; see [`Session::step`].
pub fn run_step<M: LikelihoodModel + ?Sized>(
    session: &mut Session<'_, M>,
    pool: &SamplePool,
    labels: &mut dyn LabelSource,
    truth: Option<&ParamVec>,
) -> Result<StepReport> {
    session.step(pool, labels, truth)
}

/// A sequence of pools, optionally with the true parameters, and a label oracle.
pub trait World: Sync {
    fn horizon(&self) -> usize;
    /// Pool at step `t` (1-based).
    fn pool(&self, t: usize) -> &SamplePool;
    fn theta_star(&self, t: usize) -> Option<&ParamVec>;
    /// A fresh label oracle; equal seeds give equal label sequences.
    fn labels(&self, seed: u64) -> Box<dyn LabelSource + '_>;
}

/// Runs `policy` for the configured horizon.
///
/// The up-front policy first replays an active-adaptive run with the same
/// seed to learn its total budget.
pub fn run_horizon<M: LikelihoodModel + ?Sized>(
    model: &M,
    policy: Policy,
    world: &dyn World,
    cfg: &SessionConfig,
) -> Result<Vec<StepReport>> {
    let budget = if policy == Policy::AllUpFront {
        let ghost = run_horizon(model, Policy::ActiveAdaptive, world, cfg)?;
        Some(ghost.iter().map(|r| r.k).sum())
    } else {
        None
    };
    run_horizon_with_budget(model, policy, world, cfg, budget)
}

/// As [`run_horizon`], with the up-front budget supplied by the caller.
pub fn run_horizon_with_budget<M: LikelihoodModel + ?Sized>(
    model: &M,
    policy: Policy,
    world: &dyn World,
    cfg: &SessionConfig,
    upfront_budget: Option<usize>,
) -> Result<Vec<StepReport>> {
    let horizon = cfg.horizon.min(world.horizon());
    let mut session = Session::new(model, policy, cfg.clone())?;
    if policy == Policy::AllUpFront {
        let k = upfront_budget.ok_or_else(|| Error::invalid("up-front policy needs a budget"))?;
        session.set_upfront_budget(k)?;
    }
    let mut labels = world.labels(cfg.seed);
    (1..=horizon)
        .map(|t| session.step(world.pool(t), labels.as_mut(), world.theta_star(t)))
        .collect()
}
