//! Bayesian model-based dose finding for Phase I trials.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: logistic dose-toxicity curve and its `(rho, eta)` parameterization
//! - [`posterior`]: quadrature and importance-sampling posteriors
//! - [`losses`]: loss functions and optimal-design criteria
//! - [`designs`]: dose-selection policies and coherence enforcement
//! - [`simulator`]: Monte Carlo trial simulation and operating characteristics
//! - [`config`]: study configuration files

pub mod config;
pub mod designs;
pub mod error;
pub mod losses;
pub mod model;
pub mod posterior;
pub mod simulator;

pub use error::{DoseError, Result};
