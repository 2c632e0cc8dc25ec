//! Minimal sample sizes for keeping the smallest eigenvalue of an empirical
//! feature covariance above a floor, with the Monte Carlo machinery to check
//! the bounds.

pub mod bounds;
pub mod error;
pub mod io;
pub mod knee;
pub mod ridge;
pub mod seed;
pub mod spectral;
pub mod synth;
pub mod two_stage;

pub use error::{Error, ErrorClass, Result};
