//! Calibrated multiple-output quantile regions.
//!
//! Directional quantile regression in a learned latent space, distance-based
//! conformal calibration of arbitrary point-set regions, and per-dimension
//! baselines, plus the data, grid and metric plumbing to evaluate them.

pub mod calibration;
pub mod cvae;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod naive_qr;
pub mod nn;
pub mod npdqr;
pub mod numerics;
pub mod par;
pub mod regions;
pub mod stdqr;

pub use error::{Error, Result};
