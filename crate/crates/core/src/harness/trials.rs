//! Monte Carlo runner.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::metrics::{Metric, RunRecord, StepValues, TrialMetrics};
use crate::harness::scenario::Scenario;
use crate::models::ParamDomain;
use crate::session::{run_horizon_with_budget, Policy, SessionConfig, StepReport};
use crate::solver::BoundParams;

/// Optional replacements for scenario defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub eps: Option<f64>,
    pub alpha: Option<f64>,
    pub window: Option<usize>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub k_cap: Option<usize>,
    pub r0: Option<f64>,
    pub m_safety: Option<f64>,
    pub diameter: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut SessionConfig) -> Result<()> {
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.window {
            cfg.drift.window = v;
        }
        if self.c1.is_some() || self.c2.is_some() {
            cfg.bound = BoundParams::new(self.c1.unwrap_or(cfg.bound.c1), self.c2.unwrap_or(cfg.bound.c2))?;
        }
        if let Some(v) = self.k_cap {
            cfg.k_cap = Some(v);
        }
        if let Some(v) = self.r0 {
            cfg.drift.r0 = Some(v);
        }
        if let Some(v) = self.m_safety {
            cfg.drift.m_safety = v;
        }
        if let Some(v) = self.diameter {
            cfg.domain = ParamDomain::new(cfg.domain.center().clone(), v)?;
        }
        cfg.validate()
    }
}

/// Per-trial seed derived from the master seed by a splitmix64 step.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    let mut z = master.wrapping_add((trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Metrics reported for a scenario.
pub fn scenario_metrics(scen: &Scenario) -> Vec<Metric> {
    let mut m = vec![Metric::ExcessRisk, Metric::RhoHat, Metric::K];
    if scen.kind.is_binary() {
        m.push(Metric::ClassificationError);
    }
    m
}

/// Runs every policy on one trial's world.
pub fn run_trial(scen: &Scenario, policies: &[Policy], trial: usize, master_seed: u64, ov: &Overrides) -> Vec<RunRecord> {
    let seed = trial_seed(master_seed, trial);
    let fail_all = |msg: String| {
        policies
            .iter()
            .map(|&policy| RunRecord {
                trial,
                policy,
                outcome: Err(msg.clone()),
            })
            .collect()
    };
    let world = match scen.build_world(seed) {
        Ok(w) => w,
        Err(e) => return fail_all(format!("world generation: {e}")),
    };
    let mut cfg = match scen.session_config(seed) {
        Ok(c) => c,
        Err(e) => return fail_all(e.to_string()),
    };
    if let Err(e) = ov.apply(&mut cfg) {
        return fail_all(e.to_string());
    }
    let model = &world.model;
    let summarize = |reports: &[StepReport]| -> Vec<StepValues> {
        reports
            .iter()
            .map(|r| StepValues {
                t: r.t,
                k: r.k,
                rho_hat: r.rho_hat(),
                excess_risk: r.excess_risk,
                classification_error: if scen.kind.is_binary() {
                    world.classification_error(r.t, &r.theta_hat)
                } else {
                    None
                },
            })
            .collect()
    };

    // The up-front budget is the active-adaptive total, so run that first.
    let mut adaptive: Option<std::result::Result<Vec<StepReport>, String>> = None;
    let needs_adaptive = policies.iter().any(|p| matches!(p, Policy::ActiveAdaptive | Policy::AllUpFront));
    if needs_adaptive {
        adaptive = Some(
            run_horizon_with_budget(model, Policy::ActiveAdaptive, &world, &cfg, None).map_err(|e| e.to_string()),
        );
    }
    policies
        .iter()
        .map(|&policy| {
            let outcome = match policy {
                Policy::ActiveAdaptive => adaptive.clone().expect("ran above").map(|r| summarize(&r)),
                Policy::AllUpFront => match adaptive.as_ref().expect("ran above") {
                    Ok(r) => {
                        let budget = r.iter().map(|s| s.k).sum();
                        run_horizon_with_budget(model, policy, &world, &cfg, Some(budget))
                            .map(|r| summarize(&r))
                            .map_err(|e| e.to_string())
                    }
                    Err(e) => Err(format!("ghost run failed: {e}")),
                },
                _ => run_horizon_with_budget(model, policy, &world, &cfg, None)
                    .map(|r| summarize(&r))
                    .map_err(|e| e.to_string()),
            };
            if let Err(e) = &outcome {
                log::warn!("trial {trial}, {policy}: {e}");
            }
            RunRecord { trial, policy, outcome }
        })
        .collect()
}

/// Runs `n_trials` independent trials in parallel and aggregates them.
pub fn run_trials(
    scen: &Scenario,
    policies: &[Policy],
    n_trials: usize,
    master_seed: u64,
    ov: &Overrides,
) -> Result<TrialMetrics> {
    if n_trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    if policies.is_empty() {
        return Err(Error::invalid("need at least one policy"));
    }
    scen.validate()?;
    let mut runs: Vec<RunRecord> = (0..n_trials)
        .into_par_iter()
        .flat_map_iter(|trial| run_trial(scen, policies, trial, master_seed, ov))
        .collect();
    runs.sort_by_key(|r| (r.trial, r.policy));
    Ok(TrialMetrics::aggregate(runs, policies, scen.horizon, &scenario_metrics(scen)))
}
