//! Active and adaptive sequential learning under bounded drift.
//!
//! At every step the engine picks a sampling design over an unlabeled pool by
//! minimizing a Fisher-information trace ratio, chooses the smallest label
//! budget that keeps the expected excess risk below a target, fits the MLE
//! warm-started at the previous estimate, and updates a conservative estimate
//! of how fast the optimal parameters move.

pub mod drift;
pub mod error;
pub mod fisher_design;
pub mod harness;
pub mod models;
pub mod sampling;
pub mod session;
pub mod solver;

pub use error::{Error, Result};
