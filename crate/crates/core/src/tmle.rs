//! Targeted maximum likelihood for the log-linear estimand: an initial cell
//! distribution is fluctuated along `P_ε = C(1 + εD*)P` until the empirical
//! mean of the EIC is negligible.

use serde::{Deserialize, Serialize};

use crate::capture::{cells, empirical_dist, CellDist, CellTable};
use crate::closed_form::Estimate;
use crate::error::{Error, Result, Warning};
use crate::loglinear::{eic_loglinear, estimate_at, psi_loglinear};

/// Bracket used when a direction leaves the submodel unconstrained.
pub const EPSILON_CAP: f64 = 1e6;
const GOLDEN_TOL: f64 = 1e-10;
/// Fraction of the feasible bracket kept, so fluctuated cells stay positive.
const INTERIOR: f64 = 1.0 - 1e-6;

/// Range of `ε` for which every `(1 + εD*(b))P(b)` lies in `[0, 1]`. Cells
/// with `D*(b) = 0` impose nothing; with no constraint at all the result is
/// `(-∞, ∞)`.
pub fn epsilon_bounds(p: &CellDist, d_star: &[f64]) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in cells(p.k()) {
        let d = d_star[i];
        if d == 0.0 {
            continue;
        }
        let pr = p.prob(i);
        let a = -1.0 / d;
        let b = (1.0 - pr) / (pr * d);
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (lo, hi)
}

/// `P_ε(b) = (1 + εD*(b))P(b) / Σ_{b'}(1 + εD*(b'))P(b')`.
pub fn fluctuate(p: &CellDist, eps: f64, d_star: &[f64]) -> Result<CellDist> {
    let k = p.k();
    let mut q = vec![0.0; 1 << k];
    for i in cells(k) {
        q[i] = (1.0 + eps * d_star[i]) * p.prob(i);
    }
    let total: f64 = q.iter().sum();
    if !(total > 0.0) || q.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    CellDist::from_weights(k, &q)
}

/// `Σ_b n_b log P_ε(b)`.
pub fn submodel_loglik(p: &CellDist, table: &CellTable, eps: f64, d_star: &[f64]) -> f64 {
    let k = p.k();
    let total: f64 = cells(k).map(|i| (1.0 + eps * d_star[i]) * p.prob(i)).sum();
    cells(k)
        .filter(|&i| table.count(i) > 0)
        .map(|i| {
            let q = (1.0 + eps * d_star[i]) * p.prob(i) / total;
            let lq = if q > 0.0 { q.ln() } else { f64::NEG_INFINITY };
            table.count(i) as f64 * lq
        })
        .sum()
}

/// Maximizes the submodel log-likelihood over the feasible bracket by
/// golden-section search, then compares against both endpoints.
pub fn fit_epsilon(p: &CellDist, table: &CellTable, d_star: &[f64]) -> Result<f64> {
    fit_epsilon_bracketed(p, table, d_star).map(|(e, _)| e)
}

/// As [`fit_epsilon`], also reporting whether the maximizer sits at a finite
/// end of the bracket.
fn fit_epsilon_bracketed(p: &CellDist, table: &CellTable, d_star: &[f64]) -> Result<(f64, bool)> {
    if table.n() == 0 {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = epsilon_bounds(p, d_star);
    let lo = (INTERIOR * lo).max(-EPSILON_CAP);
    let hi = (INTERIOR * hi).min(EPSILON_CAP);
    let f = |e: f64| submodel_loglik(p, table, e, d_star);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > GOLDEN_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let best = [mid, lo, hi, 0.0]
        .into_iter()
        .map(|e| (e, f(e)))
        .filter(|(_, v)| v.is_finite())
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| {
            Error::FitFailure("submodel likelihood is not finite on the bracket".into())
        })?;
    let near = |edge: f64| edge.abs() < EPSILON_CAP && (best.0 - edge).abs() <= 2.0 * GOLDEN_TOL;
    Ok((best.0, near(lo) || near(hi)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmleExit {
    /// `|P_n D*| ≤ s`.
    EicSolved,
    /// The last fluctuation was below `δ`.
    EpsilonSmall,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmleConfig {
    /// Lower bound on the `log n` factor in the stopping point.
    pub c_const: f64,
    pub delta: f64,
    pub max_iter: usize,
}

impl Default for TmleConfig {
    fn default() -> Self {
        Self {
            c_const: 1.0,
            delta: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmleResult {
    /// Point estimate and Wald interval from the EIC at `p_star`.
    pub estimate: Estimate,
    pub p_star: CellDist,
    pub iterations: usize,
    pub final_eic_mean: f64,
    pub stopping_s: f64,
    pub epsilon_trace: Vec<f64>,
    /// Training log-likelihood of the initial fit and after each update.
    pub loglik_trace: Vec<f64>,
    pub exit: TmleExit,
}

fn loglik(p: &CellDist, table: &CellTable) -> f64 {
    cells(p.k())
        .filter(|&i| table.count(i) > 0)
        .map(|i| table.count(i) as f64 * p.prob(i).ln())
        .sum()
}

/// Iterates targeted updates from `initial` until the EIC equation is solved
/// to within `s = σ_n / (max(log n, C) √n)`, the fluctuation falls below
/// `δ`, or `max_iter` is reached.
pub fn tmle(initial: &CellDist, table: &CellTable, config: &TmleConfig) -> Result<TmleResult> {
    if !initial.is_strictly_positive() {
        return Err(Error::InvalidArgument(
            "targeting needs a strictly positive initial distribution".into(),
        ));
    }
    if initial.k() != table.k() {
        return Err(Error::KMismatch {
            expected: table.k(),
            found: initial.k(),
        });
    }
    let n = table.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let nf = n as f64;
    let empirical = empirical_dist(table);

    let mut p = initial.clone();
    let mut d = eic_loglinear(&p, psi_loglinear(&p)?)?;
    let sigma = cells(p.k())
        .map(|i| empirical.prob(i) * d[i] * d[i])
        .sum::<f64>()
        .sqrt();
    let s = sigma / (nf.ln().max(config.c_const) * nf.sqrt());

    let mut eps_trace = Vec::new();
    let mut ll_trace = vec![loglik(&p, table)];
    let mut crit = empirical.expect(&d);
    let mut exit = TmleExit::MaxIterations;
    let mut iterations = 0;
    let mut boundary = None;
    while iterations < config.max_iter {
        if crit.abs() <= s {
            exit = TmleExit::EicSolved;
            break;
        }
        let (eps, at_edge) = fit_epsilon_bracketed(&p, table, &d)?;
        p = fluctuate(&p, eps, &d)?;
        iterations += 1;
        if at_edge && boundary.is_none() {
            boundary = Some(Warning::BoundaryFluctuation {
                iteration: iterations,
                epsilon: eps,
            });
        }
        eps_trace.push(eps);
        ll_trace.push(loglik(&p, table));
        d = eic_loglinear(&p, psi_loglinear(&p)?)?;
        crit = empirical.expect(&d);
        if eps.abs() <= config.delta {
            exit = if crit.abs() <= s {
                TmleExit::EicSolved
            } else {
                TmleExit::EpsilonSmall
            };
            break;
        }
    }
    if exit == TmleExit::MaxIterations && crit.abs() <= s {
        exit = TmleExit::EicSolved;
    }

    let mut estimate = estimate_at(&p, table)?;
    estimate.warnings.extend(boundary);
    if exit == TmleExit::MaxIterations {
        estimate.warnings.push(Warning::NonConvergence {
            iterations,
            eic_mean: crit,
        });
    }
    Ok(TmleResult {
        estimate,
        p_star: p,
        iterations,
        final_eic_mean: crit,
        stopping_s: s,
        epsilon_trace: eps_trace,
        loglik_trace: ll_trace,
        exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lasso::{undersmooth, LassoConfig};
    use crate::loglinear::estimate_npmle;
    use crate::testutil::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(c: [u64; 7]) -> CellTable {
        let mut full = vec![0];
        full.extend(c);
        CellTable::from_counts(3, full).unwrap()
    }

    #[test]
    fn bounds_examples() {
        let p = CellDist::new(2, vec![0.0, 0.5, 0.25, 0.25]).unwrap();
        let (l, u) = epsilon_bounds(&p, &[0.0; 4]);
        assert_eq!((l, u), (f64::NEG_INFINITY, f64::INFINITY));
        // one constrained cell with P = 0.5, D* = 1
        let (l, u) = epsilon_bounds(&p, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!((l, u), (-1.0, 1.0));
    }

    #[test]
    fn identity_at_zero_and_unit_normalizer_for_mean_zero_direction() {
        let p = linear_5_1().observed();
        let d = eic_loglinear(&p, psi_loglinear(&p).unwrap()).unwrap();
        let same = fluctuate(&p, 0.0, &d).unwrap();
        for i in cells(3) {
            assert_abs_diff_eq!(same.prob(i), p.prob(i), epsilon = 1e-15);
        }
        let eps = 0.01;
        let raw: f64 = cells(3).map(|i| (1.0 + eps * d[i]) * p.prob(i)).sum();
        assert_abs_diff_eq!(raw, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn normalizer_failure_is_reported() {
        let p = CellDist::new(2, vec![0.0, 0.5, 0.25, 0.25]).unwrap();
        assert!(matches!(
            fluctuate(&p, -2.0, &[0.0, 1.0, 1.0, 1.0]),
            Err(Error::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn score_at_zero_is_the_direction() {
        let p = all_violated_6_5().observed();
        let d = eic_loglinear(&p, psi_loglinear(&p).unwrap()).unwrap();
        let mean = p.expect(&d);
        let eps = 1e-6;
        let q = fluctuate(&p, eps, &d).unwrap();
        for i in cells(3) {
            let fd = (q.prob(i).ln() - p.prob(i).ln()) / eps;
            assert_abs_diff_eq!(fd, d[i] - mean, epsilon = 1e-4 * (1.0 + d[i].abs()));
        }
    }

    #[test]
    fn epsilon_is_zero_when_data_match_the_fit() {
        let p = CellDist::from_weights(3, &[0.0, 3.0, 2.0, 1.0, 4.0, 2.0, 1.0, 1.0]).unwrap();
        let t = counts([3000, 2000, 1000, 4000, 2000, 1000, 1000]);
        let d = eic_loglinear(&p, psi_loglinear(&p).unwrap()).unwrap();
        assert!(fit_epsilon(&p, &t, &d).unwrap().abs() < 1e-8);
    }

    #[test]
    fn submodel_loglik_is_concave_on_a_grid() {
        let p = CellDist::from_weights(3, &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let t = counts([86, 233, 4, 634, 12, 31, 1]);
        let d = eic_loglinear(&p, psi_loglinear(&p).unwrap()).unwrap();
        let (l, u) = epsilon_bounds(&p, &d);
        let grid: Vec<f64> = (1..200)
            .map(|i| l + (u - l) * i as f64 / 200.0)
            .map(|e| submodel_loglik(&p, &t, e, &d))
            .collect();
        for w in grid.windows(3) {
            assert!(w[0] + w[2] <= 2.0 * w[1] + 1e-9);
        }
        let best = fit_epsilon(&p, &t, &d).unwrap();
        let at = submodel_loglik(&p, &t, best, &d);
        assert!(grid.iter().all(|v| *v <= at + 1e-9));
    }

    #[test]
    fn exits_immediately_from_the_npmle() {
        let t = counts([120, 90, 30, 100, 25, 40, 8]);
        let emp = crate::capture::empirical_dist(&t);
        let res = tmle(&emp, &t, &TmleConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.exit, TmleExit::EicSolved);
        let npmle = estimate_npmle(&emp, t.n()).unwrap();
        assert_abs_diff_eq!(res.estimate.psi, npmle.psi, epsilon = 1e-10);
    }

    #[test]
    fn targets_a_smoothed_fit() {
        let fd = loglinear_k3([-0.9398, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        for seed in 0..5 {
            let t = draw(&fd.observed(), 1000, seed);
            let init =
                CellDist::from_weights(3, &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
            let res = tmle(&init, &t, &TmleConfig::default()).unwrap();
            assert!(res.final_eic_mean.abs() <= res.stopping_s || res.exit != TmleExit::EicSolved);
            assert!(matches!(
                res.exit,
                TmleExit::EicSolved | TmleExit::EpsilonSmall
            ));
            for w in res.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
        }
    }

    #[test]
    fn empty_cell_drives_the_update_to_the_bracket_edge() {
        // nothing observed in 111, so the likelihood keeps shrinking that cell
        let t = CellTable::from_counts(3, vec![0, 196, 73, 13, 14, 3, 1, 0]).unwrap();
        let init = undersmooth(&t, &LassoConfig::default())
            .unwrap()
            .fit
            .cell_probs;
        let res = tmle(&init, &t, &TmleConfig::default()).unwrap();
        assert!(res.p_star.prob(7) < 1e-6 * init.prob(7) * 10.0);
        assert!(res.estimate.psi > 0.999);
        assert!(res
            .estimate
            .warnings
            .iter()
            .any(|w| matches!(w, Warning::BoundaryFluctuation { iteration: 1, .. })));

        let full = draw(
            &loglinear_k3([-0.9398, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]).observed(),
            1000,
            1,
        );
        let init = undersmooth(&full, &LassoConfig::default())
            .unwrap()
            .fit
            .cell_probs;
        let res = tmle(&init, &full, &TmleConfig::default()).unwrap();
        assert!(res.estimate.warnings.is_empty());
    }

    #[test]
    fn agrees_with_npmle_from_an_undersmoothed_start() {
        let fd = loglinear_k3([-0.9398, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = LassoConfig {
            path_len: 40,
            ..LassoConfig::default()
        };
        for seed in 0..5 {
            let t = draw(&fd.observed(), 1000, seed);
            let init = undersmooth(&t, &cfg).unwrap().fit.cell_probs;
            let res = tmle(&init, &t, &TmleConfig::default()).unwrap();
            let npmle = estimate_npmle(&crate::capture::empirical_dist(&t), t.n()).unwrap();
            assert!((res.estimate.psi - npmle.psi).abs() < 0.5 * npmle.se);
        }
    }

    #[test]
    fn epsilon_shrinks_from_an_undersmoothed_start() {
        let fd = loglinear_k3([-0.9398, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let t = draw(&fd.observed(), 1000, 3);
        let cfg = LassoConfig {
            path_len: 40,
            ..LassoConfig::default()
        };
        let init = undersmooth(&t, &cfg).unwrap().cv_fit.cell_probs;
        let res = tmle(&init, &t, &TmleConfig::default()).unwrap();
        let abs: Vec<f64> = res.epsilon_trace.iter().map(|e| e.abs()).collect();
        for w in abs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{abs:?}");
        }
    }

    proptest! {
        #[test]
        fn bounds_keep_probabilities_valid(p in interior_dist(3), h in direction(3), seed in 0u64..1000) {
            let (l, u) = epsilon_bounds(&p, &h);
            let (l, u) = (l.max(-EPSILON_CAP), u.min(EPSILON_CAP));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let eps = rng.random_range(l..=u);
                for i in cells(3) {
                    let q = (1.0 + eps * h[i]) * p.prob(i);
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&q));
                }
            }
        }
    }
}
