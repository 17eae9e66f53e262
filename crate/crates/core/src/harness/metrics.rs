//! Aggregated per-step metrics and their CSV form.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::session::Policy;

/// A reported quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    ExcessRisk,
    RhoHat,
    K,
    ClassificationError,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::ExcessRisk, Metric::RhoHat, Metric::K, Metric::ClassificationError];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ExcessRisk => "excess_risk",
            Metric::RhoHat => "rho_hat",
            Metric::K => "k",
            Metric::ClassificationError => "classification_error",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

/// Mean and standard error over trials; NaN when `n = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stats {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stats {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Stats { mean, stderr, n }
    }
}

/// One policy's per-step values in one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct StepValues {
    pub t: usize,
    pub k: usize,
    pub rho_hat: Option<f64>,
    pub excess_risk: Option<f64>,
    pub classification_error: Option<f64>,
}

impl StepValues {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::ExcessRisk => self.excess_risk,
            Metric::RhoHat => self.rho_hat,
            Metric::K => Some(self.k as f64),
            Metric::ClassificationError => self.classification_error,
        }
    }
}

/// The outcome of one (trial, policy) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub trial: usize,
    pub policy: Policy,
    pub outcome: std::result::Result<Vec<StepValues>, String>,
}

/// Aggregates keyed by `(policy, t, metric)`, plus the raw runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialMetrics {
    pub rows: BTreeMap<(Policy, usize, Metric), Stats>,
    pub runs: Vec<RunRecord>,
}

impl TrialMetrics {
    /// Aggregates successful runs over `metrics` for steps `1..=horizon`.
    pub fn aggregate(runs: Vec<RunRecord>, policies: &[Policy], horizon: usize, metrics: &[Metric]) -> Self {
        let mut rows = BTreeMap::new();
        for &p in policies {
            for t in 1..=horizon {
                for &m in metrics {
                    let values: Vec<f64> = runs
                        .iter()
                        .filter(|r| r.policy == p)
                        .filter_map(|r| r.outcome.as_ref().ok())
                        .filter_map(|steps| steps.iter().find(|s| s.t == t))
                        .filter_map(|s| s.get(m))
                        .filter(|v| v.is_finite())
                        .collect();
                    rows.insert((p, t, m), Stats::from_samples(&values));
                }
            }
        }
        TrialMetrics { rows, runs }
    }

    pub fn get(&self, policy: Policy, t: usize, metric: Metric) -> Option<Stats> {
        self.rows.get(&(policy, t, metric)).copied()
    }

    /// Mean over `t ∈ [from, to]` of the per-step means.
    pub fn time_average(&self, policy: Policy, metric: Metric, from: usize, to: usize) -> f64 {
        let vals: Vec<f64> = (from..=to)
            .filter_map(|t| self.get(policy, t, metric))
            .map(|s| s.mean)
            .filter(|v| v.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Successful runs of `policy`.
    pub fn successful(&self, policy: Policy) -> impl Iterator<Item = &Vec<StepValues>> {
        self.runs
            .iter()
            .filter(move |r| r.policy == policy)
            .filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.outcome.is_err())
    }
}

pub const HEADER: &str = "policy,t,metric,mean,stderr,n";

/// Formats `v` to six significant digits, as in the metrics CSV.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // Six significant digits, then drop trailing zeros in the mantissa.
    let s = format!("{v:.5e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..=15).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

/// Writes the aggregate rows as CSV (UTF-8, LF line endings).
pub fn write_metrics<W: Write>(metrics: &TrialMetrics, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{HEADER}")?;
    for ((policy, t, metric), s) in &metrics.rows {
        writeln!(out, "{policy},{t},{metric},{},{},{}", sig6(s.mean), sig6(s.stderr), s.n)?;
    }
    out.flush()
}

pub fn emit_metrics(metrics: &TrialMetrics, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(metrics, file).map_err(|e| Error::io(path, e))
}

/// Parses a metrics CSV back into aggregate rows.
pub fn parse_metrics(path: &Path) -> Result<TrialMetrics> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {HEADER:?}"))),
    }
    let mut rows = BTreeMap::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(i + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let bad = |what: &str| parse_err(i + 1, format!("bad {what}"));
        let policy: Policy = fields[0].parse().map_err(|_| bad("policy"))?;
        let t: usize = fields[1].parse().map_err(|_| bad("step"))?;
        let metric: Metric = fields[2].parse().map_err(|_| bad("metric"))?;
        let mean: f64 = fields[3].parse().map_err(|_| bad("mean"))?;
        let stderr: f64 = fields[4].parse().map_err(|_| bad("stderr"))?;
        let n: usize = fields[5].parse().map_err(|_| bad("count"))?;
        rows.insert((policy, t, metric), Stats { mean, stderr, n });
    }
    Ok(TrialMetrics { rows, runs: Vec::new() })
}
