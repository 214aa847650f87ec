//! One entry point for every estimator, so the CLI and the Monte Carlo
//! engine run identical code paths. Estimators built on the undersmoothed
//! lasso share a single fit per table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capture::{empirical_dist, CellTable};
use crate::closed_form::{
    estimate_cond_independence, estimate_independence, estimate_linear, Estimate,
};
use crate::error::{Error, Result};
use crate::lasso::{undersmooth, LassoConfig, UndersmoothResult};
use crate::loglinear::{estimate_at, estimate_npmle, fit_glm, GlmModel};
use crate::tmle::{tmle, TmleConfig, TmleExit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorKind {
    Linear,
    Independence {
        j1: usize,
        j2: usize,
    },
    CondIndependence {
        j: usize,
        m: usize,
    },
    Npmle,
    /// Plug-in at the undersmoothed lasso fit.
    Lasso,
    /// Targeted update of the undersmoothed lasso fit.
    Tmle,
    /// Plug-in at the cross-validated lasso fit.
    LassoCv,
    /// Targeted update of the cross-validated lasso fit.
    TmleCv,
    M0,
    Mt,
}

impl EstimatorKind {
    pub const DEFAULT_PAIR: (usize, usize) = (1, 2);
    pub const DEFAULT_COND: (usize, usize) = (3, 2);

    pub fn independence() -> Self {
        let (j1, j2) = Self::DEFAULT_PAIR;
        Self::Independence { j1, j2 }
    }

    pub fn cond_independence() -> Self {
        let (j, m) = Self::DEFAULT_COND;
        Self::CondIndependence { j, m }
    }

    pub fn is_loglinear(&self) -> bool {
        !matches!(
            self,
            Self::Linear | Self::Independence { .. } | Self::CondIndependence { .. }
        )
    }

    fn uses_lasso(&self) -> bool {
        matches!(
            self,
            Self::Lasso | Self::Tmle | Self::LassoCv | Self::TmleCv
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear => write!(f, "linear"),
            Self::Independence { j1, j2 } => write!(f, "indep({j1},{j2})"),
            Self::CondIndependence { j, m } => write!(f, "condindep({j},{m})"),
            Self::Npmle => write!(f, "npmle"),
            Self::Lasso => write!(f, "lasso"),
            Self::Tmle => write!(f, "tmle"),
            Self::LassoCv => write!(f, "lasso_cv"),
            Self::TmleCv => write!(f, "tmle_cv"),
            Self::M0 => write!(f, "m0"),
            Self::Mt => write!(f, "mt"),
        }
    }
}

fn parse_pair(args: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("expected two sample numbers, got `{args}`"));
    let (a, b) = args.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// Accepts the `Display` form; `indep` and `condindep` without
    /// parentheses take the default selectors.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| {
                    Error::InvalidArgument(format!("unbalanced parentheses in `{s}`"))
                })?;
                (name, Some(inner))
            }
            None => (s, None),
        };
        let kind = match (name.to_ascii_lowercase().as_str(), args) {
            ("linear", None) => Self::Linear,
            ("indep", None) => Self::independence(),
            ("indep", Some(a)) => {
                let (j1, j2) = parse_pair(a)?;
                Self::Independence { j1, j2 }
            }
            ("condindep", None) => Self::cond_independence(),
            ("condindep", Some(a)) => {
                let (j, m) = parse_pair(a)?;
                Self::CondIndependence { j, m }
            }
            ("npmle", None) => Self::Npmle,
            ("lasso", None) => Self::Lasso,
            ("tmle", None) => Self::Tmle,
            ("lasso_cv", None) => Self::LassoCv,
            ("tmle_cv", None) => Self::TmleCv,
            ("m0", None) => Self::M0,
            ("mt", None) => Self::Mt,
            _ => return Err(Error::InvalidArgument(format!("unknown estimator `{s}`"))),
        };
        Ok(kind)
    }
}

impl TryFrom<String> for EstimatorKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorKind> for String {
    fn from(k: EstimatorKind) -> String {
        k.to_string()
    }
}

/// Settings shared by all estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub level: f64,
    pub lasso: LassoConfig,
    pub tmle: TmleConfig,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            level: crate::closed_form::DEFAULT_LEVEL,
            lasso: LassoConfig::default(),
            tmle: TmleConfig::default(),
        }
    }
}

/// Fit details beyond the point estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostics {
    Lasso {
        cv_lambda: f64,
        lambda: f64,
        lambdas_visited: Vec<f64>,
        criterion_values: Vec<f64>,
        threshold: f64,
        met: bool,
    },
    Tmle {
        initial_psi: f64,
        iterations: usize,
        exit: TmleExit,
        epsilon_trace: Vec<f64>,
        final_eic_mean: f64,
        stopping_s: f64,
    },
    Glm {
        coefficients: Vec<f64>,
        df: usize,
        loglik: f64,
        aic: f64,
        bic: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub estimate: Estimate,
    pub diagnostics: Option<Diagnostics>,
}

impl Fitted {
    fn plain(estimate: Estimate) -> Self {
        Self {
            estimate,
            diagnostics: None,
        }
    }
}

fn lasso_diagnostics(us: &UndersmoothResult) -> Diagnostics {
    Diagnostics::Lasso {
        cv_lambda: us.cv_fit.lambda,
        lambda: us.fit.lambda,
        lambdas_visited: us.lambda_path_visited.clone(),
        criterion_values: us.criterion_values.clone(),
        threshold: us.threshold,
        met: us.met,
    }
}

fn run_one(
    kind: EstimatorKind,
    table: &CellTable,
    opts: &EstimatorOptions,
    lasso: Option<&std::result::Result<UndersmoothResult, Error>>,
) -> Result<Fitted> {
    let n = table.n();
    let lasso = || lasso.expect("lasso fit prepared").clone();
    let fitted = match kind {
        EstimatorKind::Linear => Fitted::plain(estimate_linear(&empirical_dist(table), n)?),
        EstimatorKind::Independence { j1, j2 } => {
            Fitted::plain(estimate_independence(&empirical_dist(table), n, j1, j2)?)
        }
        EstimatorKind::CondIndependence { j, m } => {
            Fitted::plain(estimate_cond_independence(&empirical_dist(table), n, j, m)?)
        }
        EstimatorKind::Npmle => Fitted::plain(estimate_npmle(&empirical_dist(table), n)?),
        EstimatorKind::M0 | EstimatorKind::Mt => {
            let model = if kind == EstimatorKind::M0 {
                GlmModel::M0
            } else {
                GlmModel::Mt
            };
            let (estimate, fit) = fit_glm(table, model)?;
            Fitted {
                estimate,
                diagnostics: Some(Diagnostics::Glm {
                    coefficients: fit.coefficients,
                    df: fit.df,
                    loglik: fit.loglik,
                    aic: fit.aic,
                    bic: fit.bic,
                }),
            }
        }
        EstimatorKind::Lasso | EstimatorKind::LassoCv => {
            let us = lasso()?;
            let fit = if kind == EstimatorKind::Lasso {
                &us.fit
            } else {
                &us.cv_fit
            };
            let mut estimate = estimate_at(&fit.cell_probs, table)?;
            estimate.warnings.extend(us.warnings.iter().cloned());
            Fitted {
                estimate,
                diagnostics: Some(lasso_diagnostics(&us)),
            }
        }
        EstimatorKind::Tmle | EstimatorKind::TmleCv => {
            let us = lasso()?;
            let init = if kind == EstimatorKind::Tmle {
                &us.fit.cell_probs
            } else {
                &us.cv_fit.cell_probs
            };
            let res = tmle(init, table, &opts.tmle)?;
            Fitted {
                estimate: res.estimate,
                diagnostics: Some(Diagnostics::Tmle {
                    initial_psi: crate::loglinear::psi_loglinear(init)?,
                    iterations: res.iterations,
                    exit: res.exit,
                    epsilon_trace: res.epsilon_trace,
                    final_eic_mean: res.final_eic_mean,
                    stopping_s: res.stopping_s,
                }),
            }
        }
    };
    Ok(Fitted {
        estimate: fitted.estimate.at_level(opts.level)?,
        diagnostics: fitted.diagnostics,
    })
}

/// Runs each requested estimator on `table`. Failures are returned per
/// estimator rather than aborting the batch.
pub fn run_estimators(
    table: &CellTable,
    kinds: &[EstimatorKind],
    opts: &EstimatorOptions,
) -> Vec<(EstimatorKind, Result<Fitted>)> {
    let lasso = kinds
        .iter()
        .any(EstimatorKind::uses_lasso)
        .then(|| undersmooth(table, &opts.lasso));
    kinds
        .iter()
        .map(|&k| (k, run_one(k, table, opts, lasso.as_ref())))
        .collect()
}
