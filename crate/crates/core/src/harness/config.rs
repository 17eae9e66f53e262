//! Flat `key = value` run configuration.
//!
//! Every key is optional; command-line flags override file values, which
//! override built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<String>,
    /// Comma-separated policy names.
    pub policies: Option<String>,
    pub trials: Option<usize>,
    pub horizon: Option<usize>,
    pub eps: Option<f64>,
    pub alpha: Option<f64>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub k_cap: Option<usize>,
    pub r0: Option<f64>,
    pub m_safety: Option<f64>,
    pub diameter: Option<f64>,
    pub factors: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Keeps `self`'s values and fills gaps from `fallback`.
    pub fn or(self, fallback: RunConfig) -> RunConfig {
        RunConfig {
            scenario: self.scenario.or(fallback.scenario),
            policies: self.policies.or(fallback.policies),
            trials: self.trials.or(fallback.trials),
            horizon: self.horizon.or(fallback.horizon),
            eps: self.eps.or(fallback.eps),
            alpha: self.alpha.or(fallback.alpha),
            window: self.window.or(fallback.window),
            seed: self.seed.or(fallback.seed),
            out: self.out.or(fallback.out),
            c1: self.c1.or(fallback.c1),
            c2: self.c2.or(fallback.c2),
            k_cap: self.k_cap.or(fallback.k_cap),
            r0: self.r0.or(fallback.r0),
            m_safety: self.m_safety.or(fallback.m_safety),
            diameter: self.diameter.or(fallback.diameter),
            factors: self.factors.or(fallback.factors),
            ratings: self.ratings.or(fallback.ratings),
        }
    }
}
