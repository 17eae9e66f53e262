//! End-to-end acceptance report: one PASS/FAIL line per criterion.
//!
//! The criterion lines always print; `-- --nocapture` adds per-suite detail.

mod common;

use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use activetrack::harness::metrics::{Metric, StepValues, TrialMetrics};
use activetrack::harness::mf::{synthetic_preference_data, SyntheticSpec};
use activetrack::harness::scenario::Scenario;
use activetrack::harness::trials::{run_trials, Overrides};
use activetrack::session::Policy;

const SEED: u64 = 2026;
const ALL: [Policy; 5] = Policy::ALL;

fn report(id: u32, pass: bool, detail: String) {
    // Straight to the handle so the line shows even when output is captured.
    let line = format!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    writeln!(std::io::stdout(), "{line}").expect("stdout");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn run(scen: &Scenario, trials: usize) -> (TrialMetrics, Duration) {
    let start = Instant::now();
    let m = run_trials(scen, &ALL, trials, SEED, &Overrides::default()).expect("valid scenario");
    let elapsed = start.elapsed();
    let failures: Vec<String> = m.failures().map(|r| format!("{} {}: {:?}", r.trial, r.policy, r.outcome)).collect();
    assert!(failures.is_empty(), "failed runs: {failures:?}");
    (m, elapsed)
}

fn regression() -> &'static (TrialMetrics, Duration) {
    static CELL: OnceLock<(TrialMetrics, Duration)> = OnceLock::new();
    CELL.get_or_init(|| run(&Scenario::regression(), 100))
}

fn preference() -> (TrialMetrics, usize) {
    let (data, _) = synthetic_preference_data(&SyntheticSpec::default(), SEED).expect("synthetic data");
    let scen = Scenario::preference(Arc::new(data));
    (run(&scen, 50).0, scen.horizon)
}

fn mean(m: &TrialMetrics, p: Policy, t: usize, metric: Metric) -> f64 {
    m.get(p, t, metric).expect("aggregated").mean
}

/// Fractions of runs with `ρ̂_t ≥ floor` for all `t ≥ 5` and with `K_t`
/// nonincreasing over `t ≥ 4`.
fn conservativeness(m: &TrialMetrics, floor: f64) -> (f64, f64) {
    let runs: Vec<&Vec<StepValues>> = m.successful(Policy::ActiveAdaptive).collect();
    let n = runs.len() as f64;
    let rho_ok = runs
        .iter()
        .filter(|steps| steps.iter().filter(|s| s.t >= 5).all(|s| s.rho_hat.is_some_and(|r| r >= floor)))
        .count();
    let k_ok = runs
        .iter()
        .filter(|steps| {
            let ks: Vec<usize> = steps.iter().filter(|s| s.t >= 4).map(|s| s.k).collect();
            ks.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    (rho_ok as f64 / n, k_ok as f64 / n)
}

#[test]
fn criterion_1_regression_tracks_target() {
    let (m, elapsed) = regression();
    let scen = Scenario::regression();
    let eps = scen.eps;
    let worst = |p: Policy, from: usize| (from..=scen.horizon).map(|t| mean(m, p, t, Metric::ExcessRisk)).fold(f64::MIN, f64::max);
    let aa = worst(Policy::ActiveAdaptive, 3);
    let pa = worst(Policy::PassiveAdaptive, 3);
    let auf = (5..=scen.horizon).map(|t| mean(m, Policy::AllUpFront, t, Metric::ExcessRisk)).fold(f64::MAX, f64::min);
    let pass = aa <= eps && pa <= eps && auf > eps && elapsed.as_secs_f64() <= 300.0;
    report(
        1,
        pass,
        format!(
            "max_t>=3 ER: active-adaptive {aa:.4}, passive-adaptive {pa:.4} (<= {eps}); min_t>=5 ER all-up-front {auf:.3} (> {eps}); {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_random_restart_matches_adaptive() {
    let (m, _) = regression();
    let h = Scenario::regression().horizon;
    let aa = m.time_average(Policy::ActiveAdaptive, Metric::ExcessRisk, 3, h);
    let ar = m.time_average(Policy::ActiveRandom, Metric::ExcessRisk, 3, h);
    let rel = (aa - ar).abs() / aa;
    report(2, rel <= 0.2, format!("mean_t>=3 ER: active-adaptive {aa:.5}, active-random {ar:.5}, relative gap {rel:.3} (<= 0.2)"));
}

#[test]
fn criterion_3_regression_drift_estimate_is_conservative() {
    let (m, _) = regression();
    let (rho, k) = conservativeness(m, 10.0);
    report(
        3,
        rho >= 0.95 && k >= 0.90,
        format!("rho_hat >= 10 for all t>=5 in {:.0}% of trials (>= 95%); K nonincreasing for t>=4 in {:.0}% (>= 90%)", 100.0 * rho, 100.0 * k),
    );
}

#[test]
fn criterion_4_classification_ordering() {
    let scen = Scenario::classification();
    let (m, _) = run(&scen, 100);
    let avg = |p| m.time_average(p, Metric::ExcessRisk, 5, scen.horizon);
    let aa = avg(Policy::ActiveAdaptive);
    let baselines = [Policy::PassiveAdaptive, Policy::ActiveRandom, Policy::PassiveRandom, Policy::AllUpFront];
    let pass = baselines.iter().all(|&p| aa <= avg(p));
    let detail = baselines
        .iter()
        .map(|&p| format!("{p} {:.3e}", avg(p)))
        .collect::<Vec<_>>()
        .join(", ");
    report(4, pass, format!("mean_t>=5 ER: active-adaptive {aa:.3e} <= {detail}"));
}

#[test]
fn criterion_5_preference_tracking() {
    let (m, h) = preference();
    let m = &m;
    let err = |p| m.time_average(p, Metric::ClassificationError, 5, h);
    let (aa, pr) = (err(Policy::ActiveAdaptive), err(Policy::PassiveRandom));
    let (rho, k) = conservativeness(m, 0.1);
    report(
        5,
        aa < pr && rho >= 0.95 && k >= 0.90,
        format!(
            "mean_t>=5 held-out error: active-adaptive {aa:.4} < passive-random {pr:.4}; rho_hat >= 0.1 in {:.0}%, K nonincreasing in {:.0}%",
            100.0 * rho,
            100.0 * k
        ),
    );
}

#[test]
fn criterion_6_property_suites() {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, check) in common::PROPERTY_CHECKS {
        match check() {
            Ok(summary) => println!("  ok   {name}: {summary}"),
            Err(e) => {
                println!("  FAIL {name}: {e}");
                failed.push(name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        failed.is_empty() && secs <= 120.0,
        format!("{} of {} suites passed in {secs:.1} s (<= 120 s)", common::PROPERTY_CHECKS.len() - failed.len(), common::PROPERTY_CHECKS.len()),
    );
}
