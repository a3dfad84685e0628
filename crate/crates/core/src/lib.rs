//! Design-based randomization, rerandomization, estimation, covariate
//! adjustment and inference for 2x2 split-plot experiments.

pub mod adjustment;
pub mod cli_io;
pub mod design;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod moments;
pub mod numkernels;
pub mod rerandomization;
pub mod simharness;

pub use error::{Error, Result};
