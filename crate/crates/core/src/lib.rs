//! Small fully-connected forecasters and the second-order sensitivity
//! metrics used to judge how well they generalize.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: synthetic series, CSV ingestion, returns, windowing.
//! - [`net`]: the bias-free MLP, its initialization and the relu rescaling.
//! - [`diff`]: analytic gradients, input/weight Hessians, eigen-spectra.
//! - [`metrics`]: losses, Hessian/Jacobian summaries, noise probes.
//! - [`train`]: plain SGD with the learning-rate / batch / iteration controls.
//! - [`theory`]: path-count Λ and the expected-entropy quadrature.
//! - [`sweep`]: multi-seed experiment grids, reports and plots.

pub mod data;
pub mod diff;
mod error;
pub mod matrix;
pub mod metrics;
pub mod net;
pub mod sweep;
pub mod theory;
pub mod train;

pub use error::{Error, Result};

/// Floor used in every relative comparison to avoid dividing by ~0.
pub const EPS_FLOOR: f64 = 1e-12;

/// Relative difference `|a - b| / max(|b|, EPS_FLOOR)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(EPS_FLOOR)
}
