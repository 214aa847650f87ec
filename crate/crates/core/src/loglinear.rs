//! The log-linear estimand with no K-way interaction: its plug-in (NPMLE)
//! estimator and EIC, and the classical Poisson GLM baselines M0 and Mt.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::capture::{cells, check_k, parity, CellDist, CellTable};
use crate::closed_form::{Assumption, Estimate};
use crate::error::{Error, Result};

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-10;
/// Coefficients beyond this magnitude indicate the MLE is on the boundary.
const SEPARATION_COEF: f64 = 30.0;

fn pattern_name(i: usize, k: usize) -> String {
    crate::capture::CapturePattern::new(i, k)
        .map(|p| p.to_string())
        .unwrap_or_else(|_| i.to_string())
}

/// `Ψ_I(P) = 1 / (1 + exp((-1)^{K+1} Σ_{b≠0} f_I(b) log P(b)))`.
pub fn psi_loglinear(dist: &CellDist) -> Result<f64> {
    let k = dist.k();
    if let Some(i) = cells(k).find(|&i| !(dist.prob(i) > 0.0)) {
        return Err(Error::UndefinedEstimand(format!(
            "pattern {} has zero probability; the log-linear plug-in needs every cell positive",
            pattern_name(i, k)
        )));
    }
    let s: f64 = cells(k).map(|i| parity(i, k) * dist.prob(i).ln()).sum();
    let sign = if k.is_multiple_of(2) { -1.0 } else { 1.0 };
    Ok(1.0 / (1.0 + (sign * s).exp()))
}

/// `D*(b) = (-1)^K ψ(1-ψ) (f_I(b)/P(b) + f_I(0))` for every pattern; slot 0
/// is unused and set to zero.
pub fn eic_loglinear(dist: &CellDist, psi: f64) -> Result<Vec<f64>> {
    let k = dist.k();
    if let Some(i) = cells(k).find(|&i| !(dist.prob(i) > 0.0)) {
        return Err(Error::UndefinedEstimand(format!(
            "pattern {} has zero probability",
            pattern_name(i, k)
        )));
    }
    let scale = parity(0, k) * psi * (1.0 - psi);
    let f0 = parity(0, k);
    let mut eic = vec![0.0; 1 << k];
    for i in cells(k) {
        eic[i] = scale * (parity(i, k) / dist.prob(i) + f0);
    }
    Ok(eic)
}

/// `Ψ_I` and its EIC evaluated at a fitted distribution, with the variance
/// averaged over the observed data in `table`.
pub fn estimate_at(fitted: &CellDist, table: &CellTable) -> Result<Estimate> {
    let psi = psi_loglinear(fitted)?;
    estimate_with_psi(fitted, psi, table)
}

fn estimate_with_psi(fitted: &CellDist, psi: f64, table: &CellTable) -> Result<Estimate> {
    let eic = eic_loglinear(fitted, psi)?;
    Ok(Estimate::from_eic(
        Assumption::LogLinearKWay,
        psi,
        eic,
        &crate::capture::empirical_dist(table),
        table.n(),
    ))
}

/// Plug-in estimator at `dist`, which doubles as the observation weights.
pub fn estimate_npmle(dist: &CellDist, n: u64) -> Result<Estimate> {
    let psi = psi_loglinear(dist)?;
    let eic = eic_loglinear(dist, psi)?;
    Ok(Estimate::from_eic(
        Assumption::LogLinearKWay,
        psi,
        eic,
        dist,
        n,
    ))
}

/// Column masks of the interaction design: 0 for the intercept, then every
/// nonzero `b'` in index order, the K-way term dropped when `exclude_top`.
pub fn design_masks(k: usize, exclude_top: bool) -> Vec<usize> {
    let top = (1usize << k) - 1;
    std::iter::once(0)
        .chain(cells(k).filter(|&m| !(exclude_top && m == top)))
        .collect()
}

/// 0/1 design over the nonzero cells; entry `(c, j)` is `Π_{l ∈ mask_j} b_l(c)`.
pub fn design_matrix(k: usize, exclude_top: bool) -> Result<DMatrix<f64>> {
    check_k(k)?;
    let masks = design_masks(k, exclude_top);
    Ok(DMatrix::from_fn((1 << k) - 1, masks.len(), |r, j| {
        let c = r + 1;
        (c & masks[j] == masks[j]) as u8 as f64
    }))
}

/// Result of a Poisson log-linear GLM fit to the observed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Fitted counts per pattern; slot 0 holds the extrapolated count of
    /// never-captured individuals, `exp(a_0)`.
    pub fitted_counts: Vec<f64>,
    pub loglik: f64,
    pub deviance: f64,
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
}

impl LogLinearFit {
    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmModel {
    /// Common capture probability: intercept plus one shared main effect.
    M0,
    /// Sample-specific capture probabilities: intercept plus K main effects.
    Mt,
}

fn glm_design(k: usize, model: GlmModel) -> DMatrix<f64> {
    let cols = match model {
        GlmModel::M0 => 2,
        GlmModel::Mt => k + 1,
    };
    DMatrix::from_fn((1 << k) - 1, cols, |r, j| {
        let c = r + 1;
        match (model, j) {
            (_, 0) => 1.0,
            (GlmModel::M0, _) => c.count_ones() as f64,
            (GlmModel::Mt, j) => ((c >> (j - 1)) & 1) as f64,
        }
    })
}

fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            if y > 0.0 {
                y * (y / m).ln() - (y - m)
            } else {
                m
            }
        })
        .sum::<f64>()
}

struct IrlsFit {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    mu: Vec<f64>,
    deviance: f64,
    iterations: usize,
}

/// Poisson regression by iteratively reweighted least squares with
/// step-halving whenever the deviance increases.
fn irls(x: &DMatrix<f64>, y: &[f64]) -> Result<IrlsFit> {
    let (rows, p) = x.shape();
    let eta_of = |beta: &DVector<f64>| x * beta;
    // Start from the saturated-ish fit log(y + 0.5), projected on the design.
    let mut mu: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let mut beta = DVector::zeros(p);
    let mut deviance = f64::INFINITY;
    for iter in 1..=IRLS_MAX_ITER {
        let w = DVector::from_iterator(rows, mu.iter().copied());
        let eta_cur: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
        let z =
            DVector::from_iterator(rows, (0..rows).map(|r| eta_cur[r] + (y[r] - mu[r]) / mu[r]));
        let xtw = x.transpose() * DMatrix::from_diagonal(&w);
        let chol = (&xtw * x)
            .cholesky()
            .ok_or_else(|| Error::FitFailure("singular information matrix".into()))?;
        let target = chol.solve(&(&xtw * z));
        let mut step = target - &beta;
        let mut candidate;
        let mut new_dev;
        let mut halvings = 0;
        loop {
            candidate = &beta + &step;
            let new_mu: Vec<f64> = eta_of(&candidate).iter().map(|e| e.exp()).collect();
            new_dev = poisson_deviance(y, &new_mu);
            if new_dev.is_finite() && (new_dev <= deviance || !deviance.is_finite()) {
                mu = new_mu;
                break;
            }
            halvings += 1;
            if halvings > 50 {
                return Err(Error::FitFailure(
                    "step-halving failed to reduce deviance".into(),
                ));
            }
            step *= 0.5;
        }
        beta = candidate;
        let change = (deviance - new_dev).abs() / (new_dev.abs() + 0.1);
        deviance = new_dev;
        if change < IRLS_TOL {
            let w = DVector::from_iterator(rows, mu.iter().copied());
            let info = x.transpose() * DMatrix::from_diagonal(&w) * x;
            let cov = info
                .try_inverse()
                .ok_or_else(|| Error::FitFailure("singular information matrix".into()))?;
            return Ok(IrlsFit {
                beta,
                cov,
                mu,
                deviance,
                iterations: iter,
            });
        }
    }
    Err(Error::FitFailure(format!(
        "IRLS did not converge in {IRLS_MAX_ITER} iterations"
    )))
}

/// Fits M0 or Mt to the observed cells, extrapolates `Ê(0) = exp(â_0)` and
/// returns `ψ = n / (n + Ê(0))` with inference from the log-linear EIC at the
/// model-fitted cell probabilities.
pub fn fit_glm(table: &CellTable, model: GlmModel) -> Result<(Estimate, LogLinearFit)> {
    let k = table.k();
    let n = table.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let x = glm_design(k, model);
    let y: Vec<f64> = cells(k).map(|i| table.count(i) as f64).collect();
    let fit = irls(&x, &y)?;
    let total: f64 = fit.mu.iter().sum();
    if fit.beta.iter().any(|b| b.abs() > SEPARATION_COEF)
        || fit.mu.iter().any(|m| *m < 1e-8 * total)
    {
        return Err(Error::FitFailure(
            "maximum likelihood estimate lies on the boundary (separated data)".into(),
        ));
    }

    let p = x.ncols();
    let loglik: f64 = y
        .iter()
        .zip(&fit.mu)
        .map(|(&y, &m)| y * m.ln() - m - ln_factorial(y as u64))
        .sum();
    let nf = n as f64;
    let unobserved = fit.beta[0].exp();
    let mut fitted_counts = vec![unobserved];
    fitted_counts.extend(fit.mu.iter().copied());
    let ll = LogLinearFit {
        coefficients: fit.beta.iter().copied().collect(),
        std_errors: (0..p).map(|j| fit.cov[(j, j)].sqrt()).collect(),
        fitted_counts,
        loglik,
        deviance: fit.deviance,
        df: y.len() - p,
        aic: -2.0 * loglik + 2.0 * p as f64,
        bic: -2.0 * loglik + nf.ln() * p as f64,
        iterations: fit.iterations,
    };

    let mut w = vec![0.0];
    w.extend(fit.mu.iter().copied());
    let fitted = CellDist::from_weights(k, &w)?;
    let psi = nf / (nf + unobserved);
    let est = estimate_with_psi(&fitted, psi, table)?;
    Ok((est, ll))
}

pub fn fit_glm_mt(table: &CellTable) -> Result<(Estimate, LogLinearFit)> {
    fit_glm(table, GlmModel::Mt)
}

pub fn fit_glm_m0(table: &CellTable) -> Result<(Estimate, LogLinearFit)> {
    fit_glm(table, GlmModel::M0)
}
