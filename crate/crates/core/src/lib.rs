//! Desk-scale pipeline for forecasting the service-level latency of a
//! quorum-replicated key-value store running inside a network slice.
//!
//! The crate is organised as the pipeline runs:
//!
//! * [`simcluster`] simulates the replicated store over lossy, jittery links.
//! * [`workload`] drives it with a sinusoidally modulated Poisson load.
//! * [`telemetry`] turns simulator counters into per-second metric tables.
//! * [`datasetgen`] splits, scales and windows those tables.
//! * [`learners`] fits one-step-ahead regressors on the windows.
//! * [`tuning`] searches hyperparameters with a categorical TPE.
//! * [`evaluation`] scores forecasts and ranks models.
//! * [`anova`] measures fault impact with a three-way factorial ANOVA.

#![forbid(unsafe_code)]

pub mod anova;
pub mod config;
pub mod datasetgen;
pub mod error;
pub mod evaluation;
pub mod learners;
pub mod manifest;
pub mod numfmt;
pub mod pipeline;
pub mod rng;
pub mod simcluster;
pub mod telemetry;
pub mod tuning;
pub mod workload;

pub use error::{Error, Result};
