//! Synthetic control point predictions with conditional prediction
//! intervals that combine in-sample (weight estimation) and out-of-sample
//! (post-treatment error) uncertainty.

pub mod constraint_sets;
pub mod error;
pub mod insample;
pub mod intervals;
pub mod linalg;
pub mod montecarlo;
pub mod outsample;
pub mod panel_io;
pub mod qclp;
pub mod rng;
pub mod sc_fit;
pub mod stats;

pub use error::{Error, Result};
pub use nalgebra;
