//! L1-penalized Poisson regression of the observed cell counts on every
//! interaction below the K-way term, lambda selection by cross-validation,
//! and the undersmoothing loop that shrinks lambda until the plug-in nearly
//! solves the log-linear EIC equation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{cells, CellDist, CellTable};
use crate::error::{Error, Result, Warning};
use crate::loglinear::{design_masks, eic_loglinear, psi_loglinear};

const OUTER_TOL: f64 = 1e-9;
/// Coordinate-descent sweeps per quadratic model before the current point is
/// used as the search direction as is.
const INNER_SWEEPS: usize = 1_000;
const MAX_OUTER: usize = 200;

/// Column-sparse 0/1 design over a subset of cells.
#[derive(Clone, Debug)]
struct Design {
    /// Pattern index of each row.
    rows: Vec<usize>,
    /// Row positions where each column is one.
    cols: Vec<Vec<usize>>,
}

impl Design {
    fn new(k: usize, rows: Vec<usize>) -> Self {
        let cols = design_masks(k, true)
            .into_iter()
            .map(|m| {
                rows.iter()
                    .enumerate()
                    .filter(|(_, &c)| c & m == m)
                    .map(|(r, _)| r)
                    .collect()
            })
            .collect();
        Self { rows, cols }
    }

    fn full(k: usize) -> Self {
        Self::new(k, cells(k).collect())
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.rows.len()];
        for (col, b) in self.cols.iter().zip(beta) {
            if *b != 0.0 {
                col.iter().for_each(|&r| eta[r] += b);
            }
        }
        eta
    }

    /// Linear predictor at an arbitrary pattern.
    fn eta_at(&self, k: usize, beta: &[f64], cell: usize) -> f64 {
        design_masks(k, true)
            .iter()
            .zip(beta)
            .filter(|(&m, _)| cell & m == m)
            .map(|(_, b)| b)
            .sum()
    }
}

/// `(1/W) Σ (μ - y log μ) + λ Σ_{j≥1} |β_j|`.
fn objective(y: &[f64], eta: &[f64], w_total: f64, lambda: f64, beta: &[f64]) -> f64 {
    let fit: f64 = y.iter().zip(eta).map(|(y, e)| e.exp() - y * e).sum();
    fit / w_total + lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
struct RawFit {
    beta: Vec<f64>,
    objective_trace: Vec<f64>,
    sweeps: usize,
}

/// Proximal Newton: a quadratic model of the Poisson term is minimized by
/// cyclic coordinate descent, then a backtracking step keeps the objective
/// monotone.
fn solve(design: &Design, y: &[f64], lambda: f64, init: Option<&[f64]>) -> Result<RawFit> {
    let p = design.cols.len();
    let w_total: f64 = y.iter().sum();
    if !(w_total > 0.0) {
        return Err(Error::EmptyInput);
    }
    let mut beta = match init {
        Some(b) => b.to_vec(),
        None => {
            let mut b = vec![0.0; p];
            b[0] = (w_total / y.len() as f64).ln();
            b
        }
    };
    let mut eta = design.eta(&beta);
    let mut obj = objective(y, &eta, w_total, lambda, &beta);
    let mut trace = vec![obj];
    let mut sweeps = 0;

    for outer in 0..MAX_OUTER {
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let w: Vec<f64> = mu.iter().map(|m| m / w_total).collect();
        // residual of the working response against the current quadratic fit
        let mut resid: Vec<f64> = y.iter().zip(&mu).map(|(y, m)| (y - m) / m).collect();
        let z: Vec<f64> = eta.iter().zip(&resid).map(|(e, r)| e + r).collect();
        let hess: Vec<f64> = design
            .cols
            .iter()
            .map(|col| col.iter().map(|&r| w[r]).sum())
            .collect();
        let mut cand = beta.clone();
        for _ in 0..INNER_SWEEPS {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for (j, col) in design.cols.iter().enumerate() {
                if hess[j] <= 0.0 {
                    continue;
                }
                let grad: f64 = col.iter().map(|&r| w[r] * resid[r]).sum();
                let raw = cand[j] + grad / hess[j];
                let new = if j == 0 {
                    raw
                } else {
                    soft_threshold(hess[j] * raw, lambda) / hess[j]
                };
                let delta = new - cand[j];
                if delta != 0.0 {
                    col.iter().for_each(|&r| resid[r] -= delta);
                    cand[j] = new;
                    max_change = max_change.max(hess[j] * delta * delta);
                }
            }
            if max_change < 1e-20 {
                break;
            }
            if let Some(exact) = polish_active_set(design, &w, &z, lambda, &cand) {
                cand = exact;
                break;
            }
        }

        let dir: Vec<f64> = cand.iter().zip(&beta).map(|(c, b)| c - b).collect();
        let mut step = 1.0;
        let (new_beta, new_eta, new_obj) = loop {
            let trial: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + step * d).collect();
            let trial_eta = design.eta(&trial);
            let trial_obj = objective(y, &trial_eta, w_total, lambda, &trial);
            if trial_obj <= obj + 1e-15 * obj.abs() {
                break (trial, trial_eta, trial_obj);
            }
            step *= 0.5;
            if step < 1e-10 {
                break (beta.clone(), eta.clone(), obj);
            }
        };
        let change = (obj - new_obj).abs() / obj.abs().max(1e-12);
        let moved = new_beta
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = new_beta;
        eta = new_eta;
        obj = new_obj;
        trace.push(obj);
        if outer > 0 && change < OUTER_TOL && moved < 1e-7 || moved == 0.0 {
            return Ok(RawFit {
                beta,
                objective_trace: trace,
                sweeps,
            });
        }
    }
    Err(Error::FitFailure(format!(
        "proximal Newton did not converge in {MAX_OUTER} iterations"
    )))
}

/// Solves the quadratic subproblem exactly on the support of `cand`, keeping
/// its signs. Returns `None` unless the result satisfies the subproblem's
/// optimality conditions, in which case it is the exact minimizer.
fn polish_active_set(
    design: &Design,
    w: &[f64],
    z: &[f64],
    lambda: f64,
    cand: &[f64],
) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..cand.len())
        .filter(|&j| j == 0 || cand[j] != 0.0)
        .collect();
    let n = design.rows.len();
    let mut x = vec![vec![0.0; n]; active.len()];
    for (a, &j) in active.iter().enumerate() {
        design.cols[j].iter().for_each(|&r| x[a][r] = 1.0);
    }
    let m = active.len();
    let gram = DMatrix::from_fn(m, m, |a, b| (0..n).map(|r| w[r] * x[a][r] * x[b][r]).sum());
    let rhs = DVector::from_fn(m, |a, _| {
        let j = active[a];
        let xz: f64 = (0..n).map(|r| w[r] * x[a][r] * z[r]).sum();
        if j == 0 {
            xz
        } else {
            xz - lambda * cand[j].signum()
        }
    });
    let sol = gram.cholesky()?.solve(&rhs);
    let mut beta = vec![0.0; cand.len()];
    for (a, &j) in active.iter().enumerate() {
        if j > 0 && sol[a].signum() != cand[j].signum() {
            return None;
        }
        beta[j] = sol[a];
    }
    let fitted = design.eta(&beta);
    let resid: Vec<f64> = z.iter().zip(&fitted).map(|(z, f)| z - f).collect();
    let feasible = (1..cand.len()).filter(|j| beta[*j] == 0.0).all(|j| {
        let g: f64 = design.cols[j].iter().map(|&r| w[r] * resid[r]).sum();
        g.abs() <= lambda * (1.0 + 1e-9)
    });
    feasible.then_some(beta)
}

fn lambda_max_for(design: &Design, y: &[f64]) -> f64 {
    let w_total: f64 = y.iter().sum();
    let ybar = w_total / y.len() as f64;
    design.cols[1..]
        .iter()
        .map(|col| (col.iter().map(|&r| y[r] - ybar).sum::<f64>() / w_total).abs())
        .fold(0.0, f64::max)
}

/// Smallest lambda at which every penalized coefficient is zero.
pub fn lambda_max(table: &CellTable) -> f64 {
    let design = Design::full(table.k());
    let y = counts_of(table, &design);
    lambda_max_for(&design, &y)
}

fn counts_of(table: &CellTable, design: &Design) -> Vec<f64> {
    design.rows.iter().map(|&c| table.count(c) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub lambda: f64,
    /// Intercept first, then one coefficient per interaction mask in index
    /// order (the K-way mask excluded).
    pub coefficients: Vec<f64>,
    pub cell_probs: CellDist,
    pub converged: bool,
    pub sweeps: usize,
    /// Penalized objective after each outer iteration, starting value first.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    fn from_raw(k: usize, design: &Design, lambda: f64, raw: RawFit) -> Result<Self> {
        let eta = design.eta(&raw.beta);
        let mut w = vec![0.0; 1 << k];
        for (r, &c) in design.rows.iter().enumerate() {
            w[c] = eta[r].exp();
        }
        Ok(Self {
            lambda,
            coefficients: raw.beta,
            cell_probs: CellDist::from_weights(k, &w)?,
            converged: true,
            sweeps: raw.sweeps,
            objective_trace: raw.objective_trace,
        })
    }
}

pub fn fit_poisson_lasso(table: &CellTable, lambda: f64) -> Result<LassoFit> {
    fit_poisson_lasso_from(table, lambda, None)
}

/// As [`fit_poisson_lasso`], warm-started from `init` coefficients.
pub fn fit_poisson_lasso_from(
    table: &CellTable,
    lambda: f64,
    init: Option<&[f64]>,
) -> Result<LassoFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be >= 0"
        )));
    }
    let design = Design::full(table.k());
    let y = counts_of(table, &design);
    let raw = solve(&design, &y, lambda, init)?;
    LassoFit::from_raw(table.k(), &design, lambda, raw)
}

/// Which units are split into cross-validation folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvScheme {
    /// Individual records; held-out cell counts are compared with training
    /// rates rescaled to the held-out mass.
    Records,
    /// Whole cells, treating each cell count as one Poisson observation.
    Cells,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvRule {
    /// Lambda with the lowest mean held-out deviance.
    Min,
    /// Largest lambda within one standard error of the minimum.
    OneSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub folds: usize,
    pub path_len: usize,
    pub path_ratio: f64,
    pub scheme: CvScheme,
    pub rule: CvRule,
    pub shrink: f64,
    pub lambda_floor_ratio: f64,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            path_len: 100,
            path_ratio: 1e-4,
            scheme: CvScheme::Cells,
            rule: CvRule::OneSe,
            shrink: 0.9,
            lambda_floor_ratio: 1e-6,
            seed: 0,
        }
    }
}

/// Geometric grid from `lmax` down to `ratio·lmax`.
pub fn lambda_path(lmax: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len <= 1 {
        return vec![lmax];
    }
    (0..len)
        .map(|i| lmax * ratio.powf(i as f64 / (len - 1) as f64))
        .collect()
}

fn fit_path(design: &Design, y: &[f64], path: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut warm: Option<Vec<f64>> = None;
    path.iter()
        .map(|&l| {
            let raw = solve(design, y, l, warm.as_deref())?;
            warm = Some(raw.beta.clone());
            Ok(raw.beta)
        })
        .collect()
}

fn poisson_dev(y: f64, mu: f64) -> f64 {
    if y > 0.0 {
        2.0 * (y * (y / mu).ln() - (y - mu))
    } else {
        2.0 * mu
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub path: Vec<f64>,
    pub mean_deviance: Vec<f64>,
    pub se_deviance: Vec<f64>,
    pub folds_used: usize,
    pub warnings: Vec<Warning>,
}

/// Selects lambda by K-fold cross-validation of the Poisson deviance over a
/// geometric path starting at the full-data `λ_max`.
pub fn cv_select_lambda(table: &CellTable, config: &LassoConfig) -> Result<CvResult> {
    let k = table.k();
    if config.folds < 2 {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least 2 folds".into(),
        ));
    }
    let units = match config.scheme {
        CvScheme::Records => table.n() as usize,
        CvScheme::Cells => cells(k).len(),
    };
    if units < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 2 units, got {units}"
        )));
    }
    let mut warnings = Vec::new();
    // with cells as units the fold count is capped at the number of cells
    // by construction, so only record-level reductions are reported
    let folds = if units < config.folds {
        if config.scheme == CvScheme::Records {
            warnings.push(Warning::FoldsReduced {
                requested: config.folds,
                used: units,
            });
        }
        units
    } else {
        config.folds
    };

    let full = Design::full(k);
    let path = lambda_path(
        lambda_max_for(&full, &counts_of(table, &full)),
        config.path_len,
        config.path_ratio,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; units];
    for (pos, &u) in order.iter().enumerate() {
        fold_of[u] = pos % folds;
    }

    // deviance[f][l]
    let mut deviance = vec![vec![0.0; path.len()]; folds];
    match config.scheme {
        CvScheme::Records => {
            let mut held = vec![vec![0.0; 1 << k]; folds];
            let mut unit = 0;
            for c in cells(k) {
                for _ in 0..table.count(c) {
                    held[fold_of[unit]][c] += 1.0;
                    unit += 1;
                }
            }
            for (f, held) in held.iter().enumerate() {
                let y_train: Vec<f64> = full
                    .rows
                    .iter()
                    .map(|&c| table.count(c) as f64 - held[c])
                    .collect();
                let n_held: f64 = held.iter().sum();
                let n_train: f64 = y_train.iter().sum();
                if n_held == 0.0 || n_train == 0.0 {
                    continue;
                }
                let betas = fit_path(&full, &y_train, &path)?;
                for (l, beta) in betas.iter().enumerate() {
                    let eta = full.eta(beta);
                    deviance[f][l] = full
                        .rows
                        .iter()
                        .zip(&eta)
                        .map(|(&c, e)| poisson_dev(held[c], e.exp() * n_held / n_train))
                        .sum();
                }
            }
        }
        CvScheme::Cells => {
            for (f, dev) in deviance.iter_mut().enumerate() {
                let (train, test): (Vec<usize>, Vec<usize>) =
                    cells(k).partition(|&c| fold_of[c - 1] != f);
                let design = Design::new(k, train);
                let y = counts_of(table, &design);
                if y.iter().sum::<f64>() == 0.0 {
                    continue;
                }
                let betas = fit_path(&design, &y, &path)?;
                for (l, beta) in betas.iter().enumerate() {
                    dev[l] = test
                        .iter()
                        .map(|&c| {
                            let mu = design.eta_at(k, beta, c).exp();
                            poisson_dev(table.count(c) as f64, mu)
                        })
                        .sum();
                }
            }
        }
    }

    let nf = folds as f64;
    let mean: Vec<f64> = (0..path.len())
        .map(|l| deviance.iter().map(|d| d[l]).sum::<f64>() / nf)
        .collect();
    let se: Vec<f64> = (0..path.len())
        .map(|l| {
            let var = deviance
                .iter()
                .map(|d| (d[l] - mean[l]).powi(2))
                .sum::<f64>()
                / (nf - 1.0);
            (var / nf).sqrt()
        })
        .collect();
    let best = (0..path.len())
        .min_by(|&a, &b| mean[a].total_cmp(&mean[b]))
        .unwrap_or(0);
    let chosen = match config.rule {
        CvRule::Min => best,
        CvRule::OneSe => (0..=best)
            .find(|&l| mean[l] <= mean[best] + se[best])
            .unwrap_or(best),
    };
    Ok(CvResult {
        lambda: path[chosen],
        path,
        mean_deviance: mean,
        se_deviance: se,
        folds_used: folds,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndersmoothResult {
    pub fit: LassoFit,
    pub cv_fit: LassoFit,
    pub lambda_path_visited: Vec<f64>,
    /// `P_n D*` at each visited lambda.
    pub criterion_values: Vec<f64>,
    /// `σ_n / √n`, with `σ_n` from the cross-validated fit.
    pub threshold: f64,
    pub met: bool,
    pub warnings: Vec<Warning>,
}

/// Empirical mean of the log-linear EIC evaluated at `fit`.
pub fn eic_criterion(fit: &CellDist, empirical: &CellDist) -> Result<f64> {
    let psi = psi_loglinear(fit)?;
    Ok(empirical.expect(&eic_loglinear(fit, psi)?))
}

/// Starting from the cross-validated lambda, shrinks lambda geometrically
/// until `|P_n D*| ≤ σ_n/√n` or lambda drops below the floor.
pub fn undersmooth(table: &CellTable, config: &LassoConfig) -> Result<UndersmoothResult> {
    if !(config.shrink > 0.0 && config.shrink < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shrink factor {} must lie in (0, 1)",
            config.shrink
        )));
    }
    let cv = cv_select_lambda(table, config)?;
    let mut warnings = cv.warnings.clone();
    let cv_fit = fit_poisson_lasso(table, cv.lambda)?;
    let empirical = crate::capture::empirical_dist(table);
    let psi_cv = psi_loglinear(&cv_fit.cell_probs)?;
    let d_cv = eic_loglinear(&cv_fit.cell_probs, psi_cv)?;
    let sigma_n = cells(table.k())
        .map(|i| empirical.prob(i) * d_cv[i] * d_cv[i])
        .sum::<f64>()
        .sqrt();
    let threshold = sigma_n / (table.n() as f64).sqrt();
    let floor = config.lambda_floor_ratio * lambda_max(table);

    let mut fit = cv_fit.clone();
    let mut visited = vec![fit.lambda];
    let mut criteria = vec![empirical.expect(&d_cv)];
    loop {
        let crit = *criteria.last().unwrap();
        if crit.abs() <= threshold {
            break;
        }
        let next = fit.lambda * config.shrink;
        if next < floor {
            warnings.push(Warning::UndersmoothingIncomplete {
                lambda: fit.lambda,
                criterion: crit,
                threshold,
            });
            break;
        }
        fit = fit_poisson_lasso_from(table, next, Some(&fit.coefficients))?;
        visited.push(next);
        criteria.push(eic_criterion(&fit.cell_probs, &empirical)?);
    }
    let met = criteria.last().unwrap().abs() <= threshold;
    Ok(UndersmoothResult {
        fit,
        cv_fit,
        lambda_path_visited: visited,
        criterion_values: criteria,
        threshold,
        met,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::empirical_dist;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn table(counts: [u64; 7]) -> CellTable {
        let mut full = vec![0];
        full.extend(counts);
        CellTable::from_counts(3, full).unwrap()
    }

    fn scores(t: &CellTable, fit: &LassoFit) -> Vec<f64> {
        let design = Design::full(t.k());
        let y = counts_of(t, &design);
        let w: f64 = y.iter().sum();
        let eta = design.eta(&fit.coefficients);
        design
            .cols
            .iter()
            .map(|col| col.iter().map(|&r| y[r] - eta[r].exp()).sum::<f64>() / w)
            .collect()
    }

    #[test]
    fn huge_lambda_gives_intercept_only() {
        let t = table([120, 90, 30, 100, 25, 40, 8]);
        let fit = fit_poisson_lasso(&t, 10.0 * lambda_max(&t)).unwrap();
        assert!(fit.coefficients[1..].iter().all(|b| *b == 0.0));
        for i in 1..8 {
            assert_abs_diff_eq!(fit.cell_probs.prob(i), 1.0 / 7.0, epsilon = 1e-12);
        }
        let at_max = fit_poisson_lasso(&t, lambda_max(&t)).unwrap();
        assert!(at_max.coefficients[1..].iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn zero_lambda_reproduces_empirical() {
        let t = table([120, 90, 30, 100, 25, 40, 8]);
        let emp = empirical_dist(&t);
        for lambda in [0.0, 1e-12 * lambda_max(&t)] {
            let fit = fit_poisson_lasso(&t, lambda).unwrap();
            for i in 1..8 {
                assert_abs_diff_eq!(fit.cell_probs.prob(i), emp.prob(i), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn empty_cell_gets_positive_probability() {
        let t = table([86, 233, 4, 634, 12, 31, 0]);
        let fit = fit_poisson_lasso(&t, 0.01 * lambda_max(&t)).unwrap();
        assert!(fit.cell_probs.prob(7) > 0.0);
        assert!(fit.cell_probs.is_strictly_positive());
    }

    #[test]
    fn lambda_max_examples() {
        assert!(lambda_max(&table([50; 7])) < 1e-15);
        assert!(lambda_max(&table([236, 236, 87, 236, 87, 87, 31])) > 0.0);
        let single = table([0, 0, 0, 1, 0, 0, 0]);
        assert!(lambda_max(&single).is_finite());
        assert!(fit_poisson_lasso(&single, 0.5 * lambda_max(&single)).is_ok());
    }

    #[test]
    fn kkt_and_monotone_objective() {
        let t = table([236, 236, 87, 236, 87, 87, 31]);
        let lmax = lambda_max(&t);
        for ratio in [0.5, 0.1, 0.01, 1e-3] {
            let lambda = ratio * lmax;
            let fit = fit_poisson_lasso(&t, lambda).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.objective_trace);
            }
            let s = scores(&t, &fit);
            assert!(s[0].abs() < 1e-6);
            for (b, g) in fit.coefficients[1..].iter().zip(&s[1..]) {
                if *b == 0.0 {
                    assert!(g.abs() <= lambda + 1e-6);
                } else {
                    assert_abs_diff_eq!(*g, lambda * b.signum(), epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn path_is_geometric() {
        let p = lambda_path(2.0, 5, 1e-4);
        assert_eq!(p.len(), 5);
        assert_abs_diff_eq!(p[0], 2.0);
        assert_abs_diff_eq!(p[4], 2e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1] / p[0], p[3] / p[2], epsilon = 1e-12);
    }

    #[test]
    fn cv_reduces_folds_for_tiny_samples() {
        let records = LassoConfig {
            scheme: CvScheme::Records,
            ..LassoConfig::default()
        };
        let t = table([1, 0, 0, 1, 0, 1, 0]);
        let cv = cv_select_lambda(&t, &records).unwrap();
        assert_eq!(cv.folds_used, 3);
        assert!(matches!(
            cv.warnings[0],
            Warning::FoldsReduced {
                requested: 10,
                used: 3
            }
        ));
        let one = table([1, 0, 0, 0, 0, 0, 0]);
        assert!(cv_select_lambda(&one, &records).is_err());
        let cv = cv_select_lambda(&t, &LassoConfig::default()).unwrap();
        assert_eq!(cv.folds_used, 7);
        assert!(cv.warnings.is_empty());
    }

    #[test]
    fn cv_is_deterministic_for_a_seed() {
        let t = table([236, 236, 87, 236, 87, 87, 31]);
        let cfg = LassoConfig {
            path_len: 20,
            scheme: CvScheme::Records,
            ..LassoConfig::default()
        };
        let a = cv_select_lambda(&t, &cfg).unwrap();
        let b = cv_select_lambda(&t, &cfg).unwrap();
        assert_eq!(a, b);
        let cells = LassoConfig {
            scheme: CvScheme::Cells,
            ..cfg
        };
        let c = cv_select_lambda(&t, &cells).unwrap();
        assert_eq!(c.folds_used, 7);
    }

    #[test]
    fn cv_prefers_heavy_penalty_for_intercept_only_data() {
        // equal expected counts in every cell
        let t = table([1429, 1428, 1430, 1427, 1429, 1428, 1429]);
        let cfg = LassoConfig {
            path_len: 30,
            ..LassoConfig::default()
        };
        let cv = cv_select_lambda(&t, &cfg).unwrap();
        let upper = cv.path[cv.path.len() / 2];
        assert!(cv.lambda >= upper, "{} < {}", cv.lambda, upper);
    }

    #[test]
    fn undersmoothing_stops_at_start_when_already_solved() {
        let t = table([100; 7]);
        let res = undersmooth(&t, &LassoConfig::default()).unwrap();
        assert!(res.met);
        assert_eq!(res.lambda_path_visited.len(), 1);
    }

    #[test]
    fn undersmoothing_trace_is_consistent() {
        let t = table([86, 233, 4, 634, 12, 31, 1]);
        let cfg = LassoConfig {
            path_len: 30,
            ..LassoConfig::default()
        };
        let res = undersmooth(&t, &cfg).unwrap();
        assert_eq!(res.lambda_path_visited.len(), res.criterion_values.len());
        assert_eq!(
            res.met,
            res.criterion_values.last().unwrap().abs() <= res.threshold
        );
        for w in res.lambda_path_visited.windows(2) {
            assert_abs_diff_eq!(w[1], w[0] * 0.9, epsilon = 1e-15);
        }
        let emp = empirical_dist(&t);
        let last = eic_criterion(&res.fit.cell_probs, &emp).unwrap();
        assert_abs_diff_eq!(last, *res.criterion_values.last().unwrap(), epsilon = 1e-12);
        // replay each visited lambda from the same warm start chain
        let mut fit = res.cv_fit.clone();
        for (l, c) in res
            .lambda_path_visited
            .iter()
            .zip(&res.criterion_values)
            .skip(1)
        {
            fit = fit_poisson_lasso_from(&t, *l, Some(&fit.coefficients)).unwrap();
            assert_abs_diff_eq!(
                eic_criterion(&fit.cell_probs, &emp).unwrap(),
                *c,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn undersmoothing_rejects_bad_shrink() {
        let t = table([100; 7]);
        let cfg = LassoConfig {
            shrink: 1.0,
            ..LassoConfig::default()
        };
        assert!(undersmooth(&t, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fits_are_positive_and_monotone(
            counts in proptest::collection::vec(0u64..300, 7),
            ratio in 1e-4f64..1.0,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let mut full = vec![0];
            full.extend(counts);
            let t = CellTable::from_counts(3, full).unwrap();
            let fit = fit_poisson_lasso(&t, ratio * lambda_max(&t).max(1e-3)).unwrap();
            prop_assert!(fit.cell_probs.is_strictly_positive());
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
