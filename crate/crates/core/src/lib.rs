//! Counterfactual regression under incremental propensity-score interventions.
//!
//! The pipeline estimates nuisances (propensity and arm-wise outcome
//! regressions), forms efficient-influence-function pseudo-outcomes for the
//! shifted intervention, builds an approximating program over a basis `b(X)`
//! with optional fairness constraints, solves it, and quantifies uncertainty.

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod incremental;
pub mod nuisance;
pub mod program;
pub mod inference;
pub mod solver;

pub use error::{Error, Result};
