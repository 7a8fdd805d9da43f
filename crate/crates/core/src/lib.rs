//! Recurrent prediction-update filtering of 2-D pedestrian motion under
//! missing observations and outliers.

pub mod baselines;
pub mod cycle;
pub mod error;
pub mod harness;
pub mod math;
pub mod nn;
pub mod trajgen;

pub use error::{Error, Result};
