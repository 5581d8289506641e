//! fmsd — accelerated SDE simulation via learned error correction.
//!
//! The pipeline: simulate paired fine/coarse trajectories of a registered SDE
//! over shared Brownian increments, extract the coarse-timestamp error series,
//! pack (demos + query) in-context samples, train a small decoder-only
//! transformer to predict the error terms, and apply it at inference to lift
//! coarse solutions to fine accuracy — including block roll-out for horizons
//! longer than the model's input window.

pub mod autodiff;
pub mod correct;
pub mod dataset;
pub mod error;
pub mod integrate;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
