//! Smooth relational event models for time-stamped sender -> receiver event
//! networks: nested case-control sampled partial likelihood with time-varying
//! and random effects, non-parametric baseline estimation, martingale-residual
//! goodness-of-fit tests, and ground-truth simulation.

pub mod baseline;
pub mod commands;
pub mod config;
pub mod basis;
pub mod fit;
pub mod gof;
pub mod covariates;
pub mod error;
pub mod events;
pub mod linalg;
pub mod rng;
pub mod sampling;
pub mod simulate;
pub mod tables;

pub use error::{Error, Result};
