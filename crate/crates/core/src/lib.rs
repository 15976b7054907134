//! Empirical likelihood estimation and testing for linear structural
//! equation models over mixed graphs.

// `!(x > 0.0)` style comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bfgs;
pub mod data;
pub mod el;
pub mod error;
pub mod estfun;
pub mod estimation;
pub mod gaussian;
pub mod graph;
pub mod inference;
pub mod likelihood;
pub mod params;
pub mod simulate;

pub use data::Dataset;
pub use el::{DualOptions, DualSolution, DualStatus};
pub use error::{Error, GraphError, Result};
pub use estimation::{fit, FitMethod, FitOptions, FitResult, FitStatus};
pub use graph::{DofCounts, MixedGraph};
pub use inference::{Calibration, Engine, TestReport};
pub use params::ModelParams;
pub use simulate::{ErrorDistribution, ExperimentConfig, ExperimentReport, MethodSpec, Region};
