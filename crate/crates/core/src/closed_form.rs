//! Plug-in estimators with closed-form estimands: no K-way interaction in the
//! additive (linear) model, pairwise independence, and conditional
//! independence of two samples given that all others missed. Each returns the
//! estimate together with its efficient influence curve (EIC), which drives
//! the Wald interval.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::capture::{cells, parity, CellDist, CellTable};
use crate::error::{Error, Result, Warning};

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Identification assumption an estimate was computed under. Sample
/// selectors are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assumption {
    LinearKWay,
    Independence { j1: usize, j2: usize },
    CondIndependence { j: usize, m: usize },
    LogLinearKWay,
}

impl Assumption {
    pub fn label(&self) -> String {
        match self {
            Assumption::LinearKWay => "no K-way interaction (linear)".into(),
            Assumption::Independence { j1, j2 } => format!("independence of samples {j1},{j2}"),
            Assumption::CondIndependence { j, m } => {
                format!("conditional independence of samples {j},{m}")
            }
            Assumption::LogLinearKWay => "no K-way interaction (log-linear)".into(),
        }
    }
}

/// Point estimate of the capture probability with EIC-based inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub assumption: Assumption,
    pub psi: f64,
    /// `σ̂`, the root mean square of the EIC over the observations.
    pub sigma: f64,
    /// `σ̂ / √n`.
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub n: u64,
    /// EIC evaluated at each pattern; slot 0 unused.
    pub eic: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl Estimate {
    /// Assembles an estimate from a per-pattern EIC. `empirical` supplies the
    /// observation weights for `σ̂² = (1/n) Σ_i D*(B_i)²`.
    pub fn from_eic(
        assumption: Assumption,
        psi: f64,
        eic: Vec<f64>,
        empirical: &CellDist,
        n: u64,
    ) -> Self {
        let second_moment: f64 = cells(empirical.k())
            .map(|i| empirical.prob(i) * eic[i] * eic[i])
            .sum();
        let sigma = second_moment.sqrt();
        let se = sigma / (n as f64).sqrt();
        let z = normal_quantile(DEFAULT_LEVEL);
        let mut warnings = Vec::new();
        if !(psi > 0.0 && psi < 1.0) {
            warnings.push(Warning::OutOfRange { psi });
        }
        Self {
            assumption,
            psi,
            sigma,
            se,
            ci_lo: psi - z * se,
            ci_hi: psi + z * se,
            level: DEFAULT_LEVEL,
            n,
            eic,
            warnings,
        }
    }

    /// The same estimate with the interval recomputed at another level.
    pub fn at_level(mut self, level: f64) -> Result<Self> {
        check_level(level)?;
        let z = normal_quantile(level);
        self.level = level;
        self.ci_lo = self.psi - z * self.se;
        self.ci_hi = self.psi + z * self.se;
        Ok(self)
    }

    /// `D*(B_i)` for every observed individual, in pattern order.
    pub fn eic_per_observation(&self, table: &CellTable) -> Vec<f64> {
        cells(table.k())
            .flat_map(|i| std::iter::repeat_n(self.eic[i], table.count(i) as usize))
            .collect()
    }

    /// Empirical mean of the EIC under the weights `empirical`.
    pub fn eic_mean(&self, empirical: &CellDist) -> f64 {
        empirical.expect(&self.eic)
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "confidence level {level} must lie in (0, 1)"
        )))
    }
}

/// Two-sided standard normal critical value for `level`.
pub fn normal_quantile(level: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    std.inverse_cdf(0.5 + level / 2.0)
}

/// Wald interval `ψ ∓ z·σ̂/√n` from per-observation EIC values, with
/// `σ̂² = (1/n) Σ D*(B_i)²` (uncentred, no Bessel correction). Endpoints are
/// not clipped to [0, 1].
pub fn wald_ci(psi: f64, eic_values: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if eic_values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = eic_values.len() as f64;
    let sigma = (eic_values.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let half = normal_quantile(level) * sigma / n.sqrt();
    Ok((psi - half, psi + half))
}

/// Population size `N̂ = n/ψ̂` with the interval mapped through the same
/// monotone transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub n_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn population_size(est: &Estimate, n: u64) -> Result<SizeEstimate> {
    if !(est.psi > 0.0) {
        return Err(Error::OutOfRange(format!(
            "population size needs psi > 0, got {}",
            est.psi
        )));
    }
    let n = n as f64;
    let invert = |p: f64| if p > 0.0 { n / p } else { f64::INFINITY };
    Ok(SizeEstimate {
        n_hat: n / est.psi,
        ci_lo: invert(est.ci_hi),
        ci_hi: invert(est.ci_lo),
    })
}

/// `Ψ_f(P) = f(0) / (f(0) - Pf)` with `f = f_I`, and its EIC
/// `f(0)/(f(0)-Pf)² · (f(B) - Pf)`.
pub fn estimate_linear(dist: &CellDist, n: u64) -> Result<Estimate> {
    let k = dist.k();
    let f: Vec<f64> = (0..1usize << k).map(|i| parity(i, k)).collect();
    let f0 = f[0];
    let pf = dist.expect(&f);
    let denom = f0 - pf;
    if denom.abs() <= 4.0 * f64::EPSILON {
        return Err(Error::DegenerateDenominator("f(0) - Pf"));
    }
    let psi = f0 / denom;
    let scale = f0 / (denom * denom);
    let mut eic = vec![0.0; f.len()];
    for i in cells(k) {
        eic[i] = scale * (f[i] - pf);
    }
    Ok(Estimate::from_eic(
        Assumption::LinearKWay,
        psi,
        eic,
        dist,
        n,
    ))
}

fn check_selector(k: usize, a: usize, b: usize) -> Result<()> {
    if a == b || a == 0 || b == 0 || a > k || b > k {
        return Err(Error::InvalidArgument(format!(
            "sample selectors ({a}, {b}) must be distinct and within 1..={k}"
        )));
    }
    Ok(())
}

/// Independence of samples `j1` and `j2`:
///
/// `Ψ_II = [1 - p1 - p2 + p12] / [1 - p1 - p2 + p1·p2]`, where `p1`, `p2` are
/// the probabilities that `j1`, `j2` missed and `p12` that both missed.
///
/// The EIC is the delta-method expansion in `(p1, p2, p12)`.
pub fn estimate_independence(dist: &CellDist, n: u64, j1: usize, j2: usize) -> Result<Estimate> {
    let k = dist.k();
    check_selector(k, j1, j2)?;
    let (bit1, bit2) = (1usize << (j1 - 1), 1usize << (j2 - 1));
    let p1 = dist.marginal_missed(j1);
    let p2 = dist.marginal_missed(j2);
    let p12: f64 = cells(k)
        .filter(|i| i & (bit1 | bit2) == 0)
        .map(|i| dist.prob(i))
        .sum();
    for (j, p) in [(j1, p1), (j2, p2)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::IdentificationFailure(format!(
                "P(sample {j} missed) = {p} must lie strictly between 0 and 1"
            )));
        }
    }
    let num = 1.0 - p1 - p2 + p12;
    let den = 1.0 - p1 - p2 + p1 * p2;
    if !(den > 0.0) {
        return Err(Error::IdentificationFailure(format!(
            "non-positive denominator {den}"
        )));
    }
    let psi = num / den;
    let den2 = den * den;
    let d_p1 = (1.0 - p2) * (p12 - p2) / den2;
    let d_p2 = (1.0 - p1) * (p12 - p1) / den2;
    let d_p12 = 1.0 / den;
    let mut eic = vec![0.0; 1 << k];
    for i in cells(k) {
        let miss1 = (i & bit1 == 0) as u8 as f64;
        let miss2 = (i & bit2 == 0) as u8 as f64;
        eic[i] = d_p1 * (miss1 - p1) + d_p2 * (miss2 - p2) + d_p12 * (miss1 * miss2 - p12);
    }
    Ok(Estimate::from_eic(
        Assumption::Independence { j1, j2 },
        psi,
        eic,
        dist,
        n,
    ))
}

/// Conditional independence of samples `j` and `m` given that every other
/// sample missed. With `x = P(j and m only)`, `y = P(j only)` and
/// `z = P(m only)`, `Ψ_CI = x / (x + y·z)`.
pub fn estimate_cond_independence(dist: &CellDist, n: u64, j: usize, m: usize) -> Result<Estimate> {
    let k = dist.k();
    check_selector(k, j, m)?;
    let (cell_y, cell_z) = (1usize << (j - 1), 1usize << (m - 1));
    let cell_x = cell_y | cell_z;
    let (x, y, z) = (dist.prob(cell_x), dist.prob(cell_y), dist.prob(cell_z));
    if x == 0.0 {
        return Err(Error::UndefinedEstimand(format!(
            "no mass on the pattern captured only by samples {j} and {m}"
        )));
    }
    let den = x + y * z;
    if !(den > 0.0) {
        return Err(Error::DegenerateDenominator("x + y·z"));
    }
    let psi = x / den;
    let den2 = den * den;
    let mut eic = vec![0.0; 1 << k];
    for i in cells(k) {
        let ind = |c: usize| (i == c) as u8 as f64;
        eic[i] =
            (y * z * (ind(cell_x) - x) - x * z * (ind(cell_y) - y) - x * y * (ind(cell_z) - z))
                / den2;
    }
    Ok(Estimate::from_eic(
        Assumption::CondIndependence { j, m },
        psi,
        eic,
        dist,
        n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{empirical_dist, FullDist};
    use crate::testutil::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_reference_values() {
        let p = linear_5_1().observed();
        let est = estimate_linear(&p, 10_000).unwrap();
        assert_abs_diff_eq!(est.psi, 0.9275, epsilon = 5e-4);
        // The printed σ̂² = 0.7492 came from one draw of 10^4; the population
        // value is 0.7357, within its sampling error.
        assert_abs_diff_eq!(est.sigma.powi(2), 0.7492, epsilon = 0.02);
    }

    #[test]
    fn linear_two_samples() {
        // mass on (1,0),(0,1): f = -1 on both, Pf = -1, psi = 1/2
        let p = CellDist::new(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(estimate_linear(&p, 10).unwrap().psi, 0.5, epsilon = 1e-15);
        let p = CellDist::new(2, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            estimate_linear(&p, 10),
            Err(Error::DegenerateDenominator("f(0) - Pf"))
        );
    }

    #[test]
    fn independence_reference_values() {
        let p = independence_5_5().observed();
        let est = estimate_independence(&p, 1_000_000, 1, 2).unwrap();
        assert_abs_diff_eq!(est.psi, 0.4960, epsilon = 5e-4);
        assert_abs_diff_eq!(est.sigma.powi(2), 4.2657, epsilon = 0.01);
    }

    #[test]
    fn independence_two_samples_is_lincoln_petersen() {
        // n1 = n2 = 2/3, m = 1/3  =>  N/n = n1·n2/m = 4/3, psi = 3/4
        let third = 1.0 / 3.0;
        let p = CellDist::new(2, vec![0.0, third, third, third]).unwrap();
        let est = estimate_independence(&p, 30, 1, 2).unwrap();
        assert_abs_diff_eq!(est.psi, 0.75, epsilon = 1e-12);
        assert!(est.warnings.is_empty());

        let t = CellTable::from_counts(2, vec![0, 30, 50, 20]).unwrap();
        let (n1, n2, m) = (50.0, 70.0, 20.0);
        let est = estimate_independence(&empirical_dist(&t), t.n(), 1, 2).unwrap();
        assert_abs_diff_eq!(est.psi, 100.0 / (n1 * n2 / m), epsilon = 1e-12);
    }

    #[test]
    fn independence_needs_marginals_inside_unit_interval() {
        let p = CellDist::new(2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            estimate_independence(&p, 10, 1, 2),
            Err(Error::IdentificationFailure(_))
        ));
        let p = independence_5_5().observed();
        assert!(matches!(
            estimate_independence(&p, 10, 2, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn independence_out_of_range_is_flagged_not_clipped() {
        // positively dependent samples: p12 > p1·p2 drives psi above 1
        let p = all_violated_6_5().observed();
        let est = estimate_independence(&p, 1000, 1, 2).unwrap();
        assert!(est.psi > 1.0);
        assert!(matches!(est.warnings[0], Warning::OutOfRange { .. }));
    }

    #[test]
    fn cond_independence_reference_values() {
        let p = cond_independence_5_6().observed();
        let est = estimate_cond_independence(&p, 1_000_000, 3, 2).unwrap();
        assert_abs_diff_eq!(est.psi, 0.388, epsilon = 5e-4);
        assert_abs_diff_eq!(est.sigma.powi(2), 1.0958, epsilon = 0.01);
    }

    #[test]
    fn cond_independence_edge_cases() {
        // y = 0: psi = x / x = 1
        let p = CellDist::new(3, vec![0.0, 0.0, 0.3, 0.2, 0.1, 0.1, 0.3, 0.0]).unwrap();
        let est = estimate_cond_independence(&p, 10, 1, 2).unwrap();
        assert_eq!(est.psi, 1.0);
        let p = CellDist::new(3, vec![0.0, 0.3, 0.3, 0.0, 0.1, 0.1, 0.2, 0.0]).unwrap();
        assert!(matches!(
            estimate_cond_independence(&p, 10, 1, 2),
            Err(Error::UndefinedEstimand(_))
        ));
    }

    #[test]
    fn cond_independence_is_symmetric_in_selectors() {
        let p = cond_independence_5_6().observed();
        let a = estimate_cond_independence(&p, 100, 3, 2).unwrap();
        let b = estimate_cond_independence(&p, 100, 2, 3).unwrap();
        assert_abs_diff_eq!(a.psi, b.psi, epsilon = 1e-15);
    }

    #[test]
    fn wald_examples() {
        let (lo, hi) = wald_ci(0.5, &vec![0.0; 100], 0.95).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));
        let eic: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let (lo, hi) = wald_ci(0.5, &eic, 0.95).unwrap();
        assert_abs_diff_eq!(lo, 0.304, epsilon = 1e-3);
        assert_abs_diff_eq!(hi, 0.696, epsilon = 1e-3);
        assert!(wald_ci(0.5, &eic, 1.0).is_err());
        assert_abs_diff_eq!(normal_quantile(0.95), 1.959964, epsilon = 1e-6);
    }

    #[test]
    fn wald_matches_estimate_interval() {
        let t = CellTable::from_counts(3, vec![0, 40, 31, 12, 25, 9, 14, 6]).unwrap();
        let d = empirical_dist(&t);
        let est = estimate_linear(&d, t.n()).unwrap();
        let (lo, hi) = wald_ci(est.psi, &est.eic_per_observation(&t), 0.95).unwrap();
        assert_abs_diff_eq!(lo, est.ci_lo, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, est.ci_hi, epsilon = 1e-12);
        let wide = est.clone().at_level(0.99).unwrap();
        assert!(wide.ci_lo < est.ci_lo && wide.ci_hi > est.ci_hi);
    }

    #[test]
    fn population_size_examples() {
        let mut est = estimate_linear(&linear_5_1().observed(), 100).unwrap();
        est.psi = 0.5;
        assert_eq!(population_size(&est, 100).unwrap().n_hat, 200.0);
        est.psi = 1.0;
        assert_eq!(population_size(&est, 302).unwrap().n_hat, 302.0);
        est.psi = 0.963;
        assert_abs_diff_eq!(
            population_size(&est, 302).unwrap().n_hat,
            313.6,
            epsilon = 0.05
        );
        est.psi = 0.0;
        assert!(matches!(
            population_size(&est, 302),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn size_interval_is_monotone_transform() {
        let est = estimate_linear(&linear_5_1().observed(), 500).unwrap();
        let size = population_size(&est, 500).unwrap();
        assert_abs_diff_eq!(size.ci_lo, 500.0 / est.ci_hi, epsilon = 1e-9);
        assert_abs_diff_eq!(size.ci_hi, 500.0 / est.ci_lo, epsilon = 1e-9);
        assert!(size.ci_lo <= size.n_hat && size.n_hat <= size.ci_hi);
    }

    #[test]
    fn linear_recovers_capture_probability_under_its_constraint() {
        // P*(b) = 0.1 + 0.05 b1 + 0.02 b2 + 0.03 b3 + 0.01 b1b2 - 0.01 b2b3, no b1b2b3
        let raw: Vec<f64> = (0..8usize)
            .map(|b| {
                let bit = |j: usize| ((b >> j) & 1) as f64;
                0.1 + 0.05 * bit(0) + 0.02 * bit(1) + 0.03 * bit(2) + 0.01 * bit(0) * bit(1)
                    - 0.01 * bit(1) * bit(2)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        // rescaling keeps the K-way additive interaction at zero
        let full = FullDist::new(3, raw.iter().map(|p| p / total).collect()).unwrap();
        let est = estimate_linear(&full.observed(), 100).unwrap();
        assert_abs_diff_eq!(est.psi, full.capture_probability(), epsilon = 1e-12);
    }

    fn psi_linear(p: &CellDist) -> f64 {
        estimate_linear(p, 1).unwrap().psi
    }

    proptest! {
        #[test]
        fn eic_mean_zero_at_plug_in(counts in proptest::collection::vec(1u64..200, 7)) {
            let mut full = vec![0];
            full.extend(counts);
            let t = CellTable::from_counts(3, full).unwrap();
            let d = empirical_dist(&t);
            for est in [
                estimate_linear(&d, t.n()),
                estimate_independence(&d, t.n(), 1, 2),
                estimate_independence(&d, t.n(), 2, 3),
                estimate_cond_independence(&d, t.n(), 3, 2),
                estimate_cond_independence(&d, t.n(), 1, 2),
            ] {
                let est = est.unwrap();
                let obs = est.eic_per_observation(&t);
                let mean = obs.iter().sum::<f64>() / obs.len() as f64;
                prop_assert!(mean.abs() < 1e-10, "{:?}: {}", est.assumption, mean);
            }
        }

        #[test]
        fn gateaux_linear(p in interior_dist(3), h in direction(3)) {
            let est = estimate_linear(&p, 1).unwrap();
            check_gateaux(&p, &h, &est.eic, psi_linear)?;
        }

        #[test]
        fn gateaux_independence(p in interior_dist(3), h in direction(3), pair in 0usize..3) {
            let (a, b) = [(1, 2), (1, 3), (2, 3)][pair];
            let est = estimate_independence(&p, 1, a, b).unwrap();
            check_gateaux(&p, &h, &est.eic, |q| estimate_independence(q, 1, a, b).unwrap().psi)?;
        }

        #[test]
        fn gateaux_cond_independence(p in interior_dist(4), h in direction(4), pair in 0usize..3) {
            let (a, b) = [(3, 2), (1, 4), (2, 4)][pair];
            let est = estimate_cond_independence(&p, 1, a, b).unwrap();
            check_gateaux(&p, &h, &est.eic, |q| estimate_cond_independence(q, 1, a, b).unwrap().psi)?;
        }

        #[test]
        fn independence_uses_only_the_two_margins(p in interior_dist(3), t in 0.0f64..1.0) {
            // Moving mass between patterns that agree on samples 1 and 2 keeps
            // all bivariate-margin quantities fixed.
            let base = estimate_independence(&p, 1, 1, 2).unwrap().psi;
            let mut probs = p.probs().to_vec();
            // (1,0,0) <-> (1,0,1) and (0,1,0) <-> (0,1,1)
            for (a, b) in [(1usize, 5usize), (2, 6)] {
                let total = probs[a] + probs[b];
                probs[a] = t * total;
                probs[b] = total - probs[a];
            }
            let moved = CellDist::new(3, probs).unwrap();
            let psi = estimate_independence(&moved, 1, 1, 2).unwrap().psi;
            prop_assert!((psi - base).abs() < 1e-12);
        }
    }
}
