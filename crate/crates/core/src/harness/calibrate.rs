//! Pilot runs that fit the bound constants `C1, C2` by least squares.
//!
//! Each pilot draws a fresh world, starts the solver at distance `Δ` from the
//! true parameter, labels `K` points from the active mixture and records the
//! excess risk of the fit. The constants are fitted to the per-cell means
//! under a nonnegativity constraint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fisher_design::{optimize_design, DesignConfig};
use crate::harness::metrics::Stats;
use crate::harness::scenario::Scenario;
use crate::harness::trials::trial_seed;
use crate::models::{random_unit_vector, LikelihoodModel, ParamVec};
use crate::sampling::{draw_with_replacement, mix, query_labels};
use crate::session::{oracle_excess_risk, World};
use crate::solver::{fit_mle, BoundParams, SolverConfig, StepSize};
use crate::drift::estimate_lb;

/// Pilot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPlan {
    pub sample_sizes: Vec<usize>,
    pub deltas: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    /// Solver epochs; a small budget makes the warm start matter.
    pub solver_epochs: usize,
    pub step_scale: f64,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        CalibrationPlan {
            sample_sizes: vec![10, 20, 50, 100, 200],
            deltas: vec![0.0, 1.0, 5.0, 20.0],
            reps: 20,
            alpha: 0.9,
            solver_epochs: 3,
            step_scale: 0.1,
        }
    }
}

/// Mean excess risk at one `(K, Δ)` cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PilotCell {
    pub k: usize,
    pub delta: f64,
    pub excess_risk: Stats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Least-squares constants.
    pub fitted: BoundParams,
    /// Smallest factor `s` with `s·b(K, Δ) ≥ mean + 2·stderr` on every cell.
    pub envelope_scale: f64,
    pub cells: Vec<PilotCell>,
}

/// Runs one pilot and returns its excess risk.
fn pilot(scen: &Scenario, plan: &CalibrationPlan, k: usize, delta: f64, seed: u64) -> Result<f64> {
    let world = scen.build_world(seed)?;
    let pool = world.pool(1);
    let star = world.theta_star(1).ok_or_else(|| Error::invalid("pilot world has no true parameter"))?;
    let model = &world.model;
    let domain = scen.domain()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);

    let design = optimize_design(model, pool, star, &DesignConfig::default())?;
    let mixture = mix(&design.dist, plan.alpha)?;
    let indices = draw_with_replacement(&mixture, k, &mut rng)?;
    let mut labels = world.labels(seed);
    let batch = query_labels(pool, &mixture, &indices, true, labels.as_mut())?;

    let offset = random_unit_vector(model.dim(), &mut rng) * delta;
    let init = domain.project(&ParamVec::new(star.as_vector() + offset));
    let lb = estimate_lb(model, &batch, pool.len(), std::slice::from_ref(&init));
    let mut solver = SolverConfig::new(
        domain,
        StepSize::InverseCurvature {
            scale: plan.step_scale,
            curvature: if lb > 0.0 { lb } else { 1.0 },
        },
    );
    solver.epochs = plan.solver_epochs;
    let fit = fit_mle(model, &batch, &init, &solver, &mut rng)?;
    Ok(oracle_excess_risk(model, pool, &fit.theta_hat, star))
}

/// Nonnegative least squares for `y ≈ c1·a + c2·b`.
pub fn fit_constants(a: &[f64], b: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if a.len() != y.len() || b.len() != y.len() || y.is_empty() {
        return Err(Error::invalid("calibration needs matching, nonempty columns"));
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let (aa, bb, ab, ay, by) = (dot(a, a), dot(b, b), dot(a, b), dot(a, y), dot(b, y));
    let sse = |c1: f64, c2: f64| {
        a.iter()
            .zip(b)
            .zip(y)
            .map(|((p, q), v)| (v - c1 * p - c2 * q).powi(2))
            .sum::<f64>()
    };
    let det = aa * bb - ab * ab;
    let mut candidates = vec![(0.0, 0.0)];
    if aa > 0.0 {
        candidates.push(((ay / aa).max(0.0), 0.0));
    }
    if bb > 0.0 {
        candidates.push((0.0, (by / bb).max(0.0)));
    }
    if det.abs() > 1e-12 * aa * bb {
        let c1 = (ay * bb - by * ab) / det;
        let c2 = (by * aa - ay * ab) / det;
        if c1 >= 0.0 && c2 >= 0.0 {
            candidates.push((c1, c2));
        }
    }
    let best = candidates
        .into_iter()
        .min_by(|x, z| sse(x.0, x.1).total_cmp(&sse(z.0, z.1)))
        .expect("nonempty");
    Ok(best)
}

/// Runs the pilot grid and fits the constants.
pub fn calibrate(scen: &Scenario, plan: &CalibrationPlan, master_seed: u64) -> Result<Calibration> {
    if plan.sample_sizes.is_empty() || plan.deltas.is_empty() || plan.reps == 0 {
        return Err(Error::invalid("empty calibration grid"));
    }
    if plan.sample_sizes.contains(&0) {
        return Err(Error::invalid("pilot sample sizes must be positive"));
    }
    // Pilots only use the first step.
    let mut scen = scen.clone();
    scen.horizon = 1;
    let scen = &scen;
    let grid: Vec<(usize, f64)> = plan
        .sample_sizes
        .iter()
        .flat_map(|&k| plan.deltas.iter().map(move |&d| (k, d)))
        .collect();
    let cells = grid
        .par_iter()
        .enumerate()
        .map(|(c, &(k, delta))| {
            let values = (0..plan.reps)
                .map(|r| pilot(scen, plan, k, delta, trial_seed(master_seed, c * plan.reps + r)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(PilotCell {
                k,
                delta,
                excess_risk: Stats::from_samples(&values),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let tau_sq = scen.dim as f64 / 2.0;
    let a: Vec<f64> = cells.iter().map(|c| tau_sq / c.k as f64).collect();
    let b: Vec<f64> = cells.iter().map(|c| (c.delta / c.k as f64).powi(2)).collect();
    let y: Vec<f64> = cells.iter().map(|c| c.excess_risk.mean).collect();
    let (c1, c2) = fit_constants(&a, &b, &y)?;
    let fitted = BoundParams::new(c1.max(f64::MIN_POSITIVE), c2)?;
    let envelope_scale = cells
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(c, (p, q))| (c.excess_risk.mean + 2.0 * c.excess_risk.stderr) / (fitted.c1 * p + fitted.c2 * q))
        .fold(0.0, f64::max);
    Ok(Calibration {
        fitted,
        envelope_scale,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_constants() {
        let a = [1.0, 0.5, 0.25, 0.1];
        let b = [0.0, 1.0, 4.0, 0.2];
        let y: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 3.0 * p + 0.5 * q).collect();
        let (c1, c2) = fit_constants(&a, &b, &y).unwrap();
        assert!((c1 - 3.0).abs() < 1e-10 && (c2 - 0.5).abs() < 1e-10);
    }

    #[test]
    fn clamps_negative_coefficient() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 1.0, 1.0];
        let y = [2.0, 4.0, 6.0 - 0.0];
        let (c1, c2) = fit_constants(&a, &b, &y).unwrap();
        assert!(c1 > 0.0 && c2 >= 0.0);
    }
}
