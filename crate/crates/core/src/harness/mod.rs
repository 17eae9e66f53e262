//! Simulation scenarios, Monte Carlo trials, metrics output and the
//! matrix-factorization pretraining used by the preference scenario.

pub mod calibrate;
pub mod config;
pub mod metrics;
pub mod mf;
pub mod scenario;
pub mod trials;
