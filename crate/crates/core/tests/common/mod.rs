//! Property checks shared by the property suite and the acceptance report.
//!
//! Each check is deterministic (seeded) and returns a one-line summary on
//! success or a description of the first violation.
#![allow(dead_code)]

use activetrack::drift::{h_w, DriftState};
use activetrack::fisher_design::{
    optimize_design, optimize_design_atoms, pool_hessians, trace_ratio_of, weighted_fisher, DesignConfig,
    FisherMatrix, SamplePool, SimplexDist,
};
use activetrack::harness::scenario::Scenario;
use activetrack::models::{
    Feature, Label, LikelihoodModel, LogisticMfModel, LogisticModel, ParamVec, RegressionModel,
};
use activetrack::sampling::{draw_with_replacement, mix, query_labels, weighted_empirical_loss, LabelSource};
use activetrack::session::{run_horizon_with_budget, Policy, World};
use activetrack::solver::{bound_b, select_sample_size, BoundParams};
use activetrack::Result as AtResult;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(dim: usize, sd: f64, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z * sd
    })
}

pub fn gaussian_pool(n: usize, dim: usize, var: f64, rng: &mut dyn RngCore) -> SamplePool {
    let feats = (0..n).map(|_| Feature::new(gaussian_vec(dim, var.sqrt(), rng))).collect();
    SamplePool::new(feats, 1).unwrap()
}

fn random_psd(dim: usize, rng: &mut dyn RngCore) -> FisherMatrix {
    let b = DMatrix::from_fn(dim, dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z
    });
    FisherMatrix::new(&b * b.transpose())
}

/// Second moment `(1/n) Σ x xᵀ` over several pools.
pub fn second_moment(pools: &[&SamplePool]) -> DMatrix<f64> {
    let d = pools[0].feature_dim();
    let mut acc = DMatrix::zeros(d, d);
    let mut n = 0.0;
    for p in pools {
        for x in p.features() {
            acc += x.as_vector() * x.as_vector().transpose();
            n += 1.0;
        }
    }
    acc / n
}

/// Simplex, symmetry and PSD invariants of designs and information matrices.
pub fn simplex_and_psd() -> Check {
    let mut r = rng(11);
    let model = LogisticModel::new(3).unwrap();
    let mut cases = 0;
    for _ in 0..200 {
        let n = r.random_range(2..12);
        let pool = gaussian_pool(n, 3, 1.0, &mut r);
        let theta = ParamVec::new(gaussian_vec(3, 1.0, &mut r));
        let sol = match optimize_design(&model, &pool, &theta, &DesignConfig::default()) {
            Ok(s) => s,
            Err(e) => return Err(format!("design failed on a generic pool: {e}")),
        };
        let w = sol.dist.weights();
        if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(format!("design weights leave the simplex: {w:?}"));
        }
        let atoms = pool_hessians(&model, &pool, &theta);
        for a in &atoms {
            if !a.is_symmetric(1e-12) || a.min_eigenvalue() < -1e-12 {
                return Err("a per-sample Fisher matrix is not symmetric PSD".into());
            }
        }
        let info = weighted_fisher(&atoms, w).map_err(|e| e.to_string())?;
        let scale = info.trace().max(1e-300);
        if !info.is_symmetric(1e-12 * scale) || info.min_eigenvalue() < -1e-10 * scale {
            return Err("design information matrix is not symmetric PSD".into());
        }
        let mixed = mix(&sol.dist, r.random::<f64>()).map_err(|e| e.to_string())?;
        let mw = mixed.weights().weights();
        if mw.iter().any(|&v| v <= 0.0) || (mw.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("mixture is not strictly positive on the simplex".into());
        }
        if sol.history.windows(2).any(|h| h[1] > h[0] + 1e-12 * h[0].abs()) {
            return Err(format!("objective history increases: {:?}", sol.history));
        }
        cases += 1;
    }
    Ok(format!("{cases} random pools"))
}

/// The optimized trace ratio never exceeds the uniform design's value `d`.
pub fn objective_at_most_dim() -> Check {
    let mut r = rng(12);
    let mut worst = f64::NEG_INFINITY;
    for case in 0..300 {
        let d = r.random_range(1..6);
        let n = r.random_range(d..30);
        let atoms: Vec<FisherMatrix> = if case % 2 == 0 {
            (0..n).map(|_| random_psd(d, &mut r)).collect()
        } else {
            let pool = gaussian_pool(n, d, 0.1, &mut r);
            pool_hessians(&RegressionModel::new(d, 0.5).unwrap(), &pool, &ParamVec::zeros(d))
        };
        let sol = optimize_design_atoms(&atoms, &DesignConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max(sol.objective - d as f64);
        if sol.objective > d as f64 + 1e-6 {
            return Err(format!("objective {} exceeds d = {d}", sol.objective));
        }
    }
    Ok(format!("max(objective - d) = {worst:.3e}"))
}

fn simplex_grid(n: usize, steps: usize, prefix: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
    if prefix.len() == n - 1 {
        let used: usize = prefix.iter().sum();
        prefix.push(steps - used);
        out(prefix);
        prefix.pop();
        return;
    }
    let used: usize = prefix.iter().sum();
    for k in 0..=steps - used {
        prefix.push(k);
        simplex_grid(n, steps, prefix, out);
        prefix.pop();
    }
}

/// Brute-force grid minimum of the trace ratio over the simplex.
pub fn grid_minimum(atoms: &[FisherMatrix], ridge: f64, steps: usize) -> f64 {
    let n = atoms.len();
    let reference = weighted_fisher(atoms, SimplexDist::uniform(n).weights()).unwrap();
    let mut best = f64::INFINITY;
    simplex_grid(n, steps, &mut Vec::new(), &mut |ks| {
        let w: Vec<f64> = ks.iter().map(|&k| k as f64 / steps as f64).collect();
        let info = weighted_fisher(atoms, &w).unwrap();
        if let Ok(v) = trace_ratio_of(&info, &reference, ridge) {
            best = best.min(v);
        }
    });
    best
}

/// Optimizer agrees with a brute-force simplex grid on small instances.
pub fn grid_oracle_agreement() -> Check {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for d in 1..=2 {
        for n in 2..=5 {
            // Resolution 0.01 where the grid stays small, coarser above.
            let steps = match n {
                2 | 3 => 100,
                4 => 50,
                _ => 25,
            };
            for _ in 0..8 {
                let atoms: Vec<FisherMatrix> = (0..n).map(|_| random_psd(d, &mut r)).collect();
                let sol = optimize_design_atoms(&atoms, &DesignConfig::default()).map_err(|e| e.to_string())?;
                let grid = grid_minimum(&atoms, sol.ridge_used, steps);
                // The optimizer may beat the grid; it must not lose to it.
                let gap = (sol.objective - grid) / grid.abs().max(1.0);
                worst = worst.max(gap);
                if gap > 2e-2 {
                    return Err(format!("d={d} N={n}: optimizer {} vs grid {grid}", sol.objective));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} instances, worst relative excess over grid {worst:.2e}"))
}

fn fd_models() -> Vec<(Box<dyn LikelihoodModel>, bool)> {
    vec![
        (Box::new(RegressionModel::new(3, 0.5).unwrap()), false),
        (Box::new(LogisticModel::new(3).unwrap()), true),
        (Box::new(LogisticMfModel::new(3).unwrap()), true),
    ]
}

/// Central finite differences of loss and gradient match the analytic forms.
pub fn finite_differences() -> Check {
    let mut r = rng(14);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (model, binary) in fd_models() {
        for _ in 0..200 {
            let x = Feature::new(gaussian_vec(3, 1.0, &mut r));
            let theta = ParamVec::new(gaussian_vec(3, 1.0, &mut r));
            let y = if binary {
                if r.random::<bool>() {
                    Label::POSITIVE
                } else {
                    Label::NEGATIVE
                }
            } else {
                Label(Normal::new(0.0, 2.0).unwrap().sample(&mut r))
            };
            let g = model.grad(&x, y, &theta);
            let hess = model.hessian(&x, &theta);
            for i in 0..3 {
                let mut plus = theta.as_vector().clone();
                let mut minus = theta.as_vector().clone();
                plus[i] += h;
                minus[i] -= h;
                let (p, m) = (ParamVec::new(plus), ParamVec::new(minus));
                let fd = (model.loss(&x, y, &p) - model.loss(&x, y, &m)) / (2.0 * h);
                let err = (fd - g[i]).abs() / g[i].abs().max(1.0);
                worst = worst.max(err);
                if err > 1e-4 {
                    return Err(format!("gradient[{i}]: analytic {} vs difference {fd}", g[i]));
                }
                let gp = model.grad(&x, y, &p);
                let gm = model.grad(&x, y, &m);
                for j in 0..3 {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    let a = hess[(j, i)];
                    let err = (fd - a).abs() / a.abs().max(1.0);
                    worst = worst.max(err);
                    if err > 1e-4 {
                        return Err(format!("hessian[{j},{i}]: analytic {a} vs difference {fd}"));
                    }
                }
            }
        }
    }
    Ok(format!("600 points over 3 models, worst relative error {worst:.2e}"))
}

struct ModelLabels<'a, M: LikelihoodModel> {
    model: &'a M,
    star: &'a ParamVec,
    rng: ChaCha8Rng,
}

impl<M: LikelihoodModel> LabelSource for ModelLabels<'_, M> {
    fn label(&mut self, _t: usize, _i: usize, x: &Feature) -> AtResult<Label> {
        Ok(self.model.sample_label(x, self.star, &mut self.rng))
    }
}

/// Pool-uniform expected loss by exact enumeration.
pub fn exact_pool_risk<M: LikelihoodModel + ?Sized>(model: &M, pool: &SamplePool, theta: &ParamVec, star: &ParamVec) -> f64 {
    pool.features().iter().map(|x| model.expected_loss(x, theta, star)).sum::<f64>() / pool.len() as f64
}

fn unbiased_for<M: LikelihoodModel>(model: &M, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let d = model.dim();
    let pool = gaussian_pool(50, d, 1.0, &mut r);
    let star = ParamVec::new(gaussian_vec(d, 1.0, &mut r));
    let theta = ParamVec::new(gaussian_vec(d, 1.0, &mut r));
    let design = optimize_design(model, &pool, &star, &DesignConfig::default()).map_err(|e| e.to_string())?;
    let mixture = mix(&design.dist, 0.9).map_err(|e| e.to_string())?;
    let exact = exact_pool_risk(model, &pool, &theta, &star);
    let mut labels = ModelLabels {
        model,
        star: &star,
        rng: rng(seed + 1),
    };
    let redraws = 10_000;
    let mut values = Vec::with_capacity(redraws);
    for _ in 0..redraws {
        let idx = draw_with_replacement(&mixture, 5, &mut r).map_err(|e| e.to_string())?;
        let batch = query_labels(&pool, &mixture, &idx, true, &mut labels).map_err(|e| e.to_string())?;
        values.push(weighted_empirical_loss(model, &batch, &theta, pool.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let z = (mean - exact) / se;
    if z.abs() > 2.0 {
        return Err(format!("estimate {mean} vs exact {exact}: {z:.2} standard errors"));
    }
    Ok(z)
}

/// The importance-weighted risk estimate is unbiased for the pool risk.
pub fn importance_unbiased() -> Check {
    let zr = unbiased_for(&RegressionModel::new(3, 0.5).unwrap(), 15)?;
    let zl = unbiased_for(&LogisticModel::new(3).unwrap(), 16)?;
    Ok(format!("N=50, 10^4 redraws: z = {zr:.2} (regression), {zl:.2} (logistic)"))
}

/// `select_sample_size` returns the least `K` meeting the target.
pub fn k_minimality() -> Check {
    let mut r = rng(17);
    let mut scanned = 0;
    for _ in 0..1000 {
        let d = r.random_range(1..20);
        let eps = 10f64.powf(r.random_range(-1.5..1.0));
        let m = 10f64.powf(r.random_range(-1.0..2.0));
        let rho = r.random_range(0.0..20.0);
        let p = BoundParams::new(r.random_range(0.1..10.0), r.random_range(0.0..20.0)).unwrap();
        let cap = 1_000_000;
        let k = select_sample_size(d, eps, m, rho, &p, cap).map_err(|e| e.to_string())?;
        let delta = (2.0 * eps / m).sqrt() + rho;
        let tau = d as f64 / 2.0;
        if bound_b(tau, delta, k, &p) > eps {
            return Err(format!("K={k} misses the target"));
        }
        if k > 1 && bound_b(tau, delta, k - 1, &p) <= eps {
            return Err(format!("K={k} is not minimal"));
        }
        if k <= 5000 {
            let scan = (1..=k).find(|&j| bound_b(tau, delta, j, &p) <= eps);
            if scan != Some(k) {
                return Err(format!("integer scan gives {scan:?}, rule gives {k}"));
            }
            scanned += 1;
        }
    }
    Ok(format!("1000 parameterizations, {scanned} confirmed by integer scan"))
}

/// `b` strictly increases in `τ²`, `Δ` and `1/K`.
pub fn b_monotone() -> Check {
    let mut r = rng(18);
    for _ in 0..10_000 {
        let p = BoundParams::new(r.random_range(0.01..10.0), r.random_range(0.01..10.0)).unwrap();
        let tau = r.random_range(0.01..10.0);
        let delta = r.random_range(0.01..100.0);
        let k = r.random_range(1..10_000usize);
        let b = bound_b(tau, delta, k, &p);
        if !(bound_b(tau * 1.5, delta, k, &p) > b && bound_b(tau, delta * 1.5, k, &p) > b && bound_b(tau, delta, k + 1, &p) < b) {
            return Err(format!("monotonicity fails at tau²={tau}, Δ={delta}, K={k}"));
        }
    }
    Ok("10^4 random triples".into())
}

/// `h(c, …, c) = ((W+1)/W)·c` exactly, also through the stateful combiner.
pub fn h_identity() -> Check {
    let mut r = rng(19);
    for _ in 0..1000 {
        let w = r.random_range(1..12usize);
        let c: f64 = r.random_range(-100.0..100.0);
        let expected = (w as f64 + 1.0) / w as f64 * c;
        let got = h_w(&vec![c; w]);
        if got != expected {
            return Err(format!("h over {w} copies of {c}: {got} != {expected}"));
        }
    }
    for w in 1..6 {
        let c = 1.7;
        let mut state = DriftState::new(activetrack::drift::DriftConfig {
            window: w,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let mut last = 0.0;
        for _ in 0..200 {
            last = state.window_combine(c);
        }
        let limit = (w as f64 + 1.0) / w as f64 * c;
        if (last - limit).abs() > 0.05 * limit {
            return Err(format!("W={w}: combiner tends to {last}, expected {limit}"));
        }
    }
    Ok("exact on 1000 constant windows; combiner limit within 5%".into())
}

/// Mean `m̂` stays below the true curvature and mean `L̂_b` above the true
/// smoothness, each within two standard errors, over 200 regression runs.
pub fn m_and_lb_conservative() -> Check {
    let mut scen = Scenario::regression();
    scen.horizon = 3;
    let mut m_gap = Vec::new();
    let mut l_gap = Vec::new();
    for trial in 0..200u64 {
        let world = scen.build_world(1000 + trial).map_err(|e| e.to_string())?;
        let cfg = scen.session_config(1000 + trial).map_err(|e| e.to_string())?;
        let reports =
            run_horizon_with_budget(&world.model, Policy::ActiveAdaptive, &world, &cfg, None).map_err(|e| e.to_string())?;
        let last = reports.last().expect("horizon is 3");
        let (m_hat, lb_hat) = (last.m_hat.ok_or("no m estimate")?, last.lb_hat.ok_or("no L_b estimate")?);
        let mut m_true = f64::INFINITY;
        let mut l_true: f64 = 0.0;
        for t in 1..=3 {
            let eig = SymmetricEigen::new(second_moment(&[world.pool(t)]) * 2.0).eigenvalues;
            m_true = m_true.min(eig.min());
            l_true = l_true.max(eig.max());
        }
        m_gap.push(m_hat - m_true);
        l_gap.push(lb_hat - l_true);
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        (mean, se)
    };
    let (mm, ms) = stats(&m_gap);
    let (lm, ls) = stats(&l_gap);
    if mm > 2.0 * ms {
        return Err(format!("mean m̂ − m = {mm:.4} exceeds 2 SE = {:.4}", 2.0 * ms));
    }
    if lm < -2.0 * ls {
        return Err(format!("mean L̂_b − L_b = {lm:.4} below −2 SE = {:.4}", -2.0 * ls));
    }
    Ok(format!("mean m̂−m = {mm:.4} (SE {ms:.4}), mean L̂_b−L_b = {lm:.4} (SE {ls:.4})"))
}

/// `(1/m)·[gap of exact pool risks] ≥ ‖θ_t − θ_{t−1}‖²` for regression with
/// `m = 2 λ_min` of the pooled second moment.
pub fn lemma2_gap() -> Check {
    let mut r = rng(20);
    let model = RegressionModel::new(5, 0.5).unwrap();
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let prev_pool = gaussian_pool(50, 5, 0.1, &mut r);
        let pool = gaussian_pool(50, 5, 0.1, &mut r);
        let prev = ParamVec::new(gaussian_vec(5, 5.0, &mut r));
        let curr = ParamVec::new(prev.as_vector() + gaussian_vec(5, 3.0, &mut r));
        let risk = |p: &SamplePool, theta: &ParamVec, star: &ParamVec| exact_pool_risk(&model, p, theta, star);
        let gap = risk(&pool, &prev, &curr) - risk(&pool, &curr, &curr) + risk(&prev_pool, &curr, &prev)
            - risk(&prev_pool, &prev, &prev);
        let m = 2.0 * SymmetricEigen::new(second_moment(&[&prev_pool, &pool])).eigenvalues.min();
        let ratio = gap / m / prev.distance(&curr).powi(2);
        worst = worst.min(ratio);
        if ratio < 1.0 - 1e-9 {
            return Err(format!("gap/m = {ratio} · ‖Δθ‖²"));
        }
    }
    Ok(format!("1000 pool pairs, min (gap/m)/‖Δθ‖² = {worst:.4}"))
}

pub type NamedCheck = (&'static str, fn() -> Check);

pub const PROPERTY_CHECKS: [NamedCheck; 10] = [
    ("simplex and PSD invariants", simplex_and_psd),
    ("design objective at most d", objective_at_most_dim),
    ("grid-oracle agreement", grid_oracle_agreement),
    ("finite-difference derivatives", finite_differences),
    ("importance-estimator unbiasedness", importance_unbiased),
    ("K* minimality", k_minimality),
    ("b monotonicity", b_monotone),
    ("h_W constant identity", h_identity),
    ("m and L_b conservativeness", m_and_lb_conservative),
    ("strong-convexity gap inequality", lemma2_gap),
];
