use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use activetrack::harness::calibrate::{calibrate, CalibrationPlan};
use activetrack::harness::config::RunConfig;
use activetrack::harness::metrics::{emit_metrics, sig6, write_metrics, Metric, TrialMetrics};
use activetrack::harness::mf::{
    load_ratings_csv, pretrain_mf, read_factors, synthetic_preference_data, write_factors, FactorFile, MfConfig,
    SyntheticSpec, MIN_RATINGS_PER_USER,
};
use activetrack::harness::scenario::{PreferenceData, Scenario, ScenarioKind};
use activetrack::harness::trials::{run_trial, run_trials, scenario_metrics, Overrides};
use activetrack::session::Policy;
use activetrack::{Error, Result};

#[derive(Parser)]
#[command(name = "activetrack", version, about = "Active and adaptive sequential learning under drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo comparison of policies on a simulated scenario.
    Simulate(RunArgs),
    /// Fit the bound constants C1, C2 on pilot runs.
    Calibrate(CalibrateArgs),
    /// Pretrain logistic matrix-factorization factors from a ratings CSV.
    MfPretrain(PretrainArgs),
    /// Track one user's drifting preferences over pretrained item factors.
    Track(TrackArgs),
}

/// Flags shared with the config file. Flags win over file values.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Mixing weight on the optimized design.
    #[arg(long)]
    alpha: Option<f64>,
    /// Drift-estimator window length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Upper limit on labels per step.
    #[arg(long)]
    k_cap: Option<usize>,
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long)]
    m_safety: Option<f64>,
    /// Diameter of the parameter ball.
    #[arg(long)]
    diameter: Option<f64>,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// regression, classification or preference.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated policy names.
    #[arg(long)]
    policies: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Factor file for the preference scenario; generated when absent.
    #[arg(long)]
    factors: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pilot repetitions per grid cell.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PretrainArgs {
    /// `user_id,item_id,rating` CSV with 1-5 stars.
    #[arg(long, required_unless_present = "synthetic")]
    ratings: Option<PathBuf>,
    /// Generate ratings instead of reading them.
    #[arg(long, conflicts_with = "ratings")]
    synthetic: bool,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Factor file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    factors: PathBuf,
    /// User id as it appears in the factor file.
    #[arg(long)]
    user: String,
    #[arg(long)]
    policies: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::MfPretrain(a) => mf_pretrain(a),
        Command::Track(a) => track(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn merged(common: &Common, extra: RunConfig) -> Result<RunConfig> {
    let flags = RunConfig {
        horizon: common.horizon,
        eps: common.eps,
        alpha: common.alpha,
        window: common.window,
        out: common.out.clone(),
        c1: common.c1,
        c2: common.c2,
        k_cap: common.k_cap,
        r0: common.r0,
        m_safety: common.m_safety,
        diameter: common.diameter,
        ..extra
    };
    let file = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(flags.or(file))
}

fn overrides(cfg: &RunConfig) -> Overrides {
    Overrides {
        eps: cfg.eps,
        alpha: cfg.alpha,
        window: cfg.window,
        c1: cfg.c1,
        c2: cfg.c2,
        k_cap: cfg.k_cap,
        r0: cfg.r0,
        m_safety: cfg.m_safety,
        diameter: None,
    }
}

fn parse_policies(list: Option<&str>, default: &[Policy]) -> Result<Vec<Policy>> {
    match list {
        None => Ok(default.to_vec()),
        Some(s) => s.split(',').map(|p| p.trim().parse()).collect(),
    }
}

fn load_preference(path: &Path, only_user: Option<&str>) -> Result<PreferenceData> {
    let file = read_factors(path)?;
    let users = match only_user {
        Some(id) => vec![file
            .users
            .iter()
            .find(|(u, _)| u == id)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("user {id:?} not in {}", path.display())))?],
        None => file.users.iter().map(|(_, v)| v.clone()).collect(),
    };
    PreferenceData::new(file.items.into_iter().map(|(_, v)| v).collect(), users)
}

fn build_scenario(name: &str, factors: Option<&Path>, seed: u64, cfg: &RunConfig) -> Result<Scenario> {
    let kind: ScenarioKind = name.parse()?;
    let mut scen = match kind {
        ScenarioKind::Regression => Scenario::regression(),
        ScenarioKind::Classification => Scenario::classification(),
        ScenarioKind::Preference => {
            let data = match factors {
                Some(p) => load_preference(p, None)?,
                None => synthetic_preference_data(&SyntheticSpec::default(), seed)?.0,
            };
            Scenario::preference(Arc::new(data))
        }
    };
    apply_scenario(&mut scen, cfg);
    Ok(scen)
}

fn apply_scenario(scen: &mut Scenario, cfg: &RunConfig) {
    if let Some(h) = cfg.horizon {
        scen.horizon = h;
    }
    if let Some(d) = cfg.diameter {
        scen.diameter = d;
    }
    if let Some(e) = cfg.eps {
        scen.eps = e;
    }
}

fn write_out(metrics: &TrialMetrics, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => emit_metrics(metrics, p),
        None => write_metrics(metrics, io::stdout().lock()).map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
    }
}

fn simulate(a: RunArgs) -> Result<()> {
    let cfg = merged(
        &a.common,
        RunConfig {
            scenario: a.scenario.clone(),
            policies: a.policies.clone(),
            trials: a.trials,
            factors: a.factors.clone(),
            ..RunConfig::default()
        },
    )?;
    let name = cfg.scenario.as_deref().unwrap_or("regression");
    let scen = build_scenario(name, cfg.factors.as_deref(), a.seed, &cfg)?;
    let policies = parse_policies(cfg.policies.as_deref(), &Policy::ALL)?;
    let default_trials = if scen.kind == ScenarioKind::Preference { 50 } else { 100 };
    let trials = cfg.trials.unwrap_or(default_trials);
    let started = Instant::now();
    let metrics = run_trials(&scen, &policies, trials, a.seed, &overrides(&cfg))?;
    let failures = metrics.failures().count();
    if failures > 0 {
        log::warn!("{failures} runs failed");
    }
    log::info!("{trials} trials in {:.1?}", started.elapsed());
    write_out(&metrics, cfg.out.as_deref())
}

fn run_calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = merged(
        &a.common,
        RunConfig {
            scenario: a.scenario.clone(),
            ..RunConfig::default()
        },
    )?;
    let name = cfg.scenario.as_deref().unwrap_or("regression");
    if name.parse::<ScenarioKind>()? == ScenarioKind::Preference {
        return Err(Error::InvalidArgument("calibration runs on regression or classification".into()));
    }
    let scen = build_scenario(name, None, a.seed, &cfg)?;
    let plan = CalibrationPlan {
        reps: a.reps,
        alpha: cfg.alpha.unwrap_or(CalibrationPlan::default().alpha),
        ..CalibrationPlan::default()
    };
    let cal = calibrate(&scen, &plan, a.seed)?;
    let mut text = String::from("k,delta,mean,stderr,n\n");
    for c in &cal.cells {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            c.k,
            sig6(c.delta),
            sig6(c.excess_risk.mean),
            sig6(c.excess_risk.stderr),
            c.excess_risk.n
        ));
    }
    match cfg.out {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?,
        None => print!("{text}"),
    }
    eprintln!(
        "c1 = {:.6}\nc2 = {:.6}\nenvelope_scale = {:.6}",
        cal.fitted.c1, cal.fitted.c2, cal.envelope_scale
    );
    Ok(())
}

fn mf_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = MfConfig {
        dim: a.dim,
        epochs: a.epochs,
        ..MfConfig::default()
    };
    let (table, fit) = if a.synthetic {
        let spec = SyntheticSpec {
            dim: a.dim,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let raw = activetrack::harness::mf::generate_ratings(
            spec.n_users,
            spec.n_items,
            spec.dim,
            spec.density,
            MIN_RATINGS_PER_USER,
            spec.factor_scale,
            &mut rng,
        )?;
        let table = activetrack::harness::mf::RatingsTable::from_raw(
            raw.triples.into_iter().map(|(u, b, r)| (u, b, f64::from(r))),
            MIN_RATINGS_PER_USER,
        )?;
        let fit = pretrain_mf(&table, &cfg, &mut rng)?;
        (table, fit)
    } else {
        let path = a.ratings.as_deref().expect("clap enforces --ratings");
        let table = load_ratings_csv(path, MIN_RATINGS_PER_USER)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let fit = pretrain_mf(&table, &cfg, &mut rng)?;
        (table, fit)
    };
    write_factors(&a.out, &FactorFile::from_training(&table, &fit))?;
    eprintln!(
        "{} users, {} items, {} ratings; final train log-loss {:.4}, held-out log-loss {:.4}",
        table.n_users(),
        table.n_items(),
        table.len(),
        fit.train_loss.last().copied().unwrap_or(f64::NAN),
        fit.heldout_log_loss
    );
    Ok(())
}

fn track(a: TrackArgs) -> Result<()> {
    let cfg = merged(
        &a.common,
        RunConfig {
            policies: a.policies.clone(),
            ..RunConfig::default()
        },
    )?;
    let data = load_preference(&a.factors, Some(&a.user))?;
    let mut scen = Scenario::preference(Arc::new(data));
    apply_scenario(&mut scen, &cfg);
    scen.validate()?;
    let policies = parse_policies(cfg.policies.as_deref(), &[Policy::ActiveAdaptive])?;
    let runs = run_trial(&scen, &policies, 0, a.seed, &overrides(&cfg));
    if let Some(r) = runs.iter().find(|r| r.outcome.is_err()) {
        let msg = r.outcome.as_ref().err().cloned().unwrap_or_default();
        return Err(Error::InvalidArgument(format!("{}: {msg}", r.policy)));
    }
    let metrics: Vec<Metric> = scenario_metrics(&scen);
    let agg = TrialMetrics::aggregate(runs, &policies, scen.horizon, &metrics);
    write_out(&agg, cfg.out.as_deref())
}
