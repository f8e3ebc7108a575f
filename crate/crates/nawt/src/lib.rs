//! Navigated weighting (NAWT) for propensity-score estimation: weighted
//! score equations tailored to the target estimand, Hajek-weighted effect
//! estimators, M-estimation and GMM inference, and a reproducible Monte
//! Carlo harness.

pub mod cli;
pub mod error;
pub mod estimands;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod simulation;
pub mod solver;

pub use error::{NawtError, Result};
