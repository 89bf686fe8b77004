//! Geostatistical attention for spatio-temporal forecasting.
//!
//! A transformer encoder whose attention logits carry a learnable Matérn
//! covariance bias, trained on simulated Gaussian random fields and checked
//! against an exact Kriging oracle with a suite of forecast diagnostics.

pub mod autodiff;
pub mod baselines;
pub mod checks;
pub mod error;
pub mod experiment;
pub mod geokernels;
pub mod grf_sim;
pub mod io;
pub mod linalg;
pub mod model;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use geokernels::{KernelFamily, KernelSpec, SensorGrid};
