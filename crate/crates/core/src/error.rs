use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid capture pattern: {0}")]
    InvalidPattern(String),

    #[error("number of samples K={0} is outside the supported range 2..=20")]
    UnsupportedK(usize),

    #[error("records disagree on the number of samples: expected {expected}, found {found}")]
    KMismatch { expected: usize, found: usize },

    #[error("no observations")]
    EmptyInput,

    #[error("the never-captured pattern cannot appear in observed data")]
    ZeroPatternObserved,

    #[error("degenerate denominator in {0}")]
    DegenerateDenominator(&'static str),

    #[error("identification failure: {0}")]
    IdentificationFailure(String),

    #[error("estimand undefined: {0}")]
    UndefinedEstimand(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("model fit failed: {0}")]
    FitFailure(String),

    #[error("fluctuation parameter {0} makes the submodel normalizer non-positive")]
    InvalidEpsilon(f64),

    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

impl Error {
    /// Stable snake_case name of the variant, used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPattern(_) => "invalid_pattern",
            Error::UnsupportedK(_) => "unsupported_k",
            Error::KMismatch { .. } => "k_mismatch",
            Error::EmptyInput => "empty_input",
            Error::ZeroPatternObserved => "zero_pattern_observed",
            Error::DegenerateDenominator(_) => "degenerate_denominator",
            Error::IdentificationFailure(_) => "identification_failure",
            Error::UndefinedEstimand(_) => "undefined_estimand",
            Error::OutOfRange(_) => "out_of_range",
            Error::FitFailure(_) => "fit_failure",
            Error::InvalidEpsilon(_) => "invalid_epsilon",
            Error::InvalidDgp(_) => "invalid_dgp",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownScenario(_) => "unknown_scenario",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Non-fatal conditions attached to an estimate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The point estimate fell outside (0, 1); it is reported unclipped.
    OutOfRange { psi: f64 },
    /// Lambda reached the floor before the EIC criterion was met.
    UndersmoothingIncomplete {
        lambda: f64,
        criterion: f64,
        threshold: f64,
    },
    /// The targeting loop hit its iteration cap.
    NonConvergence { iterations: usize, eic_mean: f64 },
    /// Cross-validation used fewer folds than requested.
    FoldsReduced { requested: usize, used: usize },
    /// A targeting step went to the edge of the feasible range, driving some
    /// cell probability toward zero.
    BoundaryFluctuation { iteration: usize, epsilon: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::OutOfRange { psi } => write!(f, "estimate {psi:.4} outside (0, 1)"),
            Warning::UndersmoothingIncomplete {
                lambda,
                criterion,
                threshold,
            } => write!(
                f,
                "undersmoothing stopped at lambda={lambda:.3e} with |Pn D*|={criterion:.3e} > {threshold:.3e}"
            ),
            Warning::NonConvergence {
                iterations,
                eic_mean,
            } => write!(
                f,
                "targeting did not converge in {iterations} iterations (Pn D*={eic_mean:.3e})"
            ),
            Warning::FoldsReduced { requested, used } => {
                write!(f, "cross-validation used {used} folds instead of {requested}")
            }
            Warning::BoundaryFluctuation { iteration, epsilon } => write!(
                f,
                "targeting step {iteration} hit the edge of the feasible range (epsilon={epsilon:.3e}); a cell probability was pushed toward zero"
            ),
        }
    }
}
