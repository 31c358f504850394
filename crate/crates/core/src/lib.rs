//! Multi-target Bayesian transformer for longitudinal biomarker prediction.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod mtr;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
