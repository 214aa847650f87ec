//! Capture-recapture estimation of the probability that a member of a closed
//! population is captured at least once, and of the population size.

pub mod capture;
pub mod closed_form;
pub mod error;
pub mod estimator;
pub mod lasso;
pub mod loglinear;
pub mod simulation;
pub mod tmle;

#[cfg(test)]
pub(crate) mod testutil;

pub use capture::{CapturePattern, CellDist, CellTable, FullDist};
pub use closed_form::{Assumption, Estimate, SizeEstimate};
pub use error::{Error, Result, Warning};
pub use estimator::{run_estimators, EstimatorKind, EstimatorOptions, Fitted};
pub use simulation::{Dgp, McConfig, McReport, Scenario};
