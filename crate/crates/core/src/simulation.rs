//! Data-generating processes, multinomial sampling, the scenario catalog and
//! the Monte Carlo engine that scores estimators on repeated draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::{cells, check_k, CellTable, FullDist};
use crate::error::{Error, Result};
use crate::estimator::{run_estimators, EstimatorKind, EstimatorOptions};

const DGP_SUM_TOLERANCE: f64 = 1e-9;

/// Full-data distribution over `{0,1}^K`. Coefficient vectors are indexed by
/// interaction mask: entry `m` multiplies `Π_{j ∈ m} b_j`, entry 0 is the
/// constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Dgp {
    /// `P*(b) = Σ_m α_m Π_{j∈m} b_j`.
    AdditiveLinear { k: usize, coefficients: Vec<f64> },
    /// `P*(b) ∝ exp(Σ_{m≠0} a_m Π_{j∈m} b_j)`; the constant is recomputed.
    LogLinear { k: usize, coefficients: Vec<f64> },
    /// `probs[j][h] = P(B_{j+1} = 1 | history h)`, where `h` indexes
    /// `(b_1, …, b_j)` with `b_1` least significant.
    SequentialConditional { k: usize, probs: Vec<Vec<f64>> },
}

impl Dgp {
    pub fn k(&self) -> usize {
        match self {
            Dgp::AdditiveLinear { k, .. }
            | Dgp::LogLinear { k, .. }
            | Dgp::SequentialConditional { k, .. } => *k,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Dgp::AdditiveLinear { .. } => "additive_linear",
            Dgp::LogLinear { .. } => "log_linear",
            Dgp::SequentialConditional { .. } => "sequential_conditional",
        }
    }
}

fn subset_sum(coefficients: &[f64], b: usize) -> f64 {
    coefficients
        .iter()
        .enumerate()
        .filter(|(m, _)| b & m == *m)
        .map(|(_, a)| a)
        .sum()
}

/// Exact probabilities of every capture history under `dgp`.
pub fn full_dist(dgp: &Dgp) -> Result<FullDist> {
    let k = dgp.k();
    check_k(k)?;
    let size = 1usize << k;
    let probs: Vec<f64> = match dgp {
        Dgp::AdditiveLinear { coefficients, .. } => {
            if coefficients.len() != size {
                return Err(Error::InvalidDgp(format!(
                    "expected {size} coefficients, got {}",
                    coefficients.len()
                )));
            }
            let p: Vec<f64> = (0..size).map(|b| subset_sum(coefficients, b)).collect();
            if let Some(b) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidDgp(format!(
                    "pattern {b} has probability {} outside [0, 1]",
                    p[b]
                )));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > DGP_SUM_TOLERANCE {
                return Err(Error::InvalidDgp(format!("probabilities sum to {total}")));
            }
            p.iter().map(|v| v / total).collect()
        }
        Dgp::LogLinear { coefficients, .. } => {
            if coefficients.len() != size {
                return Err(Error::InvalidDgp(format!(
                    "expected {size} coefficients, got {}",
                    coefficients.len()
                )));
            }
            let mut free = coefficients.clone();
            free[0] = 0.0;
            let raw: Vec<f64> = (0..size).map(|b| subset_sum(&free, b).exp()).collect();
            let total: f64 = raw.iter().sum();
            if !total.is_finite() {
                return Err(Error::InvalidDgp("coefficients overflow".into()));
            }
            raw.iter().map(|v| v / total).collect()
        }
        Dgp::SequentialConditional { probs, .. } => {
            if probs.len() != k || probs.iter().enumerate().any(|(j, p)| p.len() != 1 << j) {
                return Err(Error::InvalidDgp(
                    "sample j needs 2^(j-1) conditional probabilities".into(),
                ));
            }
            if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidDgp(
                    "conditional probability outside [0, 1]".into(),
                ));
            }
            (0..size)
                .map(|b| {
                    (0..k)
                        .map(|j| {
                            let p = probs[j][b & ((1 << j) - 1)];
                            if (b >> j) & 1 == 1 {
                                p
                            } else {
                                1.0 - p
                            }
                        })
                        .product()
                })
                .collect()
        }
    };
    if !(probs[0] < 1.0) {
        return Err(Error::InvalidDgp("nobody is ever captured".into()));
    }
    FullDist::new(k, probs)
}

/// `1 - P*(0)`.
pub fn true_psi(fd: &FullDist) -> f64 {
    fd.capture_probability()
}

/// Multinomial draw of `n` observed individuals, as a chain of binomials
/// over the cells in index order.
pub fn sample_observed<R: Rng + ?Sized>(fd: &FullDist, n: u64, rng: &mut R) -> CellTable {
    let obs = fd.observed();
    let k = fd.k();
    let mut counts = vec![0u64; 1 << k];
    let mut left = n;
    let mut mass = 1.0;
    for i in cells(k) {
        if left == 0 {
            break;
        }
        let p = obs.prob(i);
        let c = if mass <= p || i == (1 << k) - 1 {
            left
        } else {
            Binomial::new(left, (p / mass).clamp(0.0, 1.0))
                .expect("valid binomial")
                .sample(rng)
        };
        counts[i] = c;
        left -= c;
        mass -= p;
    }
    CellTable::from_counts(k, counts).expect("counts are consistent")
}

pub fn sample_observed_seeded(fd: &FullDist, n: u64, seed: u64) -> CellTable {
    sample_observed(fd, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A named data-generating process with the estimators studied on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub key: String,
    pub title: String,
    pub dgp: Dgp,
    /// Stated true value of `ψ`, rounded. Optional in scenario files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi0: Option<f64>,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<u64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_reps() -> usize {
    1000
}

fn default_sizes() -> Vec<u64> {
    vec![1000]
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("scenario file: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("scenario file: {e}")))
    }

    pub fn full_dist(&self) -> Result<FullDist> {
        full_dist(&self.dgp)
    }
}

/// Printed order of the eight K=3 coefficients mapped to interaction masks:
/// constant, b1, b2, b3, b2b3, b1b3, b1b2, b1b2b3.
pub const K3_COEFFICIENT_MASKS: [usize; 8] = [0, 1, 2, 4, 6, 5, 3, 7];

/// Reorders K=3 coefficients from the conventional listing to mask order.
pub fn k3_coefficients(listed: [f64; 8]) -> Vec<f64> {
    let mut out = vec![0.0; 8];
    for (mask, a) in K3_COEFFICIENT_MASKS.iter().zip(listed) {
        out[*mask] = a;
    }
    out
}

fn scenario(
    key: &str,
    title: &str,
    dgp: Dgp,
    psi0: f64,
    estimators: Vec<EstimatorKind>,
) -> Scenario {
    Scenario {
        key: key.into(),
        title: title.into(),
        dgp,
        psi0: Some(psi0),
        estimators,
        reps: default_reps(),
        sample_sizes: default_sizes(),
        seed: 0,
    }
}

fn additive(listed: [f64; 8]) -> Dgp {
    Dgp::AdditiveLinear {
        k: 3,
        coefficients: k3_coefficients(listed),
    }
}

fn loglinear(listed: [f64; 8]) -> Dgp {
    Dgp::LogLinear {
        k: 3,
        coefficients: k3_coefficients(listed),
    }
}

/// `p3` lists `P(B3 = 1 | b1, b2)` for `(b1, b2)` = (0,0), (1,0), (0,1), (1,1).
fn sequential(p1: f64, p2: [f64; 2], p3: [f64; 4]) -> Dgp {
    Dgp::SequentialConditional {
        k: 3,
        probs: vec![vec![p1], p2.to_vec(), p3.to_vec()],
    }
}

/// Every built-in scenario, keyed by short identifiers.
pub fn scenario_catalog() -> Vec<Scenario> {
    use EstimatorKind::*;
    let loglinear_set = vec![Npmle, Lasso, Tmle, M0, Mt];
    let grid = vec![500, 1000, 5000];
    let mut list = vec![
        scenario(
            "5.1",
            "no K-way additive interaction holds",
            additive([0.0725, 0.03, 0.01, 0.04, 0.01, 0.02, 0.02, 0.0]),
            0.9275,
            vec![Linear],
        ),
        scenario(
            "5.2.1",
            "main-effects log-linear model",
            loglinear([-0.9398, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]),
            0.6093,
            vec![Npmle, Lasso, Tmle, LassoCv, TmleCv, M0, Mt],
        ),
        scenario(
            "5.2.2",
            "log-linear model with weak pairwise interactions",
            loglinear([-0.9194, -1.0, -1.0, -1.0, -0.1, -0.1, -0.1, 0.0]),
            0.6013,
            loglinear_set.clone(),
        ),
        scenario(
            "5.2.3",
            "log-linear model with near-empty cells",
            loglinear([-0.4578, -1.0, -2.0, -3.0, -1.0, -1.0, -1.0, 0.0]),
            0.3674,
            loglinear_set.clone(),
        ),
        scenario(
            "5.5",
            "samples 1 and 2 independent",
            sequential(0.1, [0.2, 0.2], [0.3, 0.25, 0.3, 0.25]),
            0.4960,
            vec![EstimatorKind::independence()],
        ),
        scenario(
            "5.6",
            "samples 2 and 3 independent given sample 1 missed",
            sequential(0.1, [0.15, 0.2], [0.2, 0.25, 0.2, 0.25]),
            0.388,
            vec![EstimatorKind::cond_independence()],
        ),
        scenario(
            "6.1",
            "K-way additive interaction present",
            additive([0.11, 0.1, 0.05, 0.08, -0.2, -0.2, -0.1, 0.2]),
            0.8900,
            vec![Linear],
        ),
        scenario(
            "6.2",
            "samples 1 and 2 dependent",
            sequential(0.5, [0.5, 0.6], [0.5, 0.5, 0.5, 0.5]),
            0.875,
            vec![EstimatorKind::independence()],
        ),
        scenario(
            "6.3",
            "samples 2 and 3 dependent given sample 1 missed",
            sequential(0.1, [0.15, 0.2], [0.5, 0.5, 0.2, 0.1]),
            0.6175,
            vec![EstimatorKind::cond_independence()],
        ),
        scenario(
            "6.4",
            "K-way log-linear interaction present",
            loglinear([-1.6333, 0.0, 0.0, 0.0, -1.0, -2.0, -0.5, 1.0]),
            0.8074,
            loglinear_set,
        ),
        scenario(
            "6.5",
            "every identification assumption violated",
            loglinear([-1.1835, -1.0, -1.0, -1.0, -1.5, -1.0, 2.0, 1.0]),
            0.6938,
            vec![
                CondIndependence { j: 1, m: 2 },
                Independence { j1: 2, j2: 3 },
                Linear,
                Npmle,
                Lasso,
                Tmle,
                M0,
                Mt,
            ],
        ),
    ];
    for s in &mut list {
        if matches!(
            s.key.as_str(),
            "5.1" | "5.5" | "5.6" | "6.1" | "6.2" | "6.3"
        ) {
            s.sample_sizes = grid.clone();
        }
    }
    list
}

pub fn find_scenario(key: &str) -> Result<Scenario> {
    scenario_catalog()
        .into_iter()
        .find(|s| s.key == key)
        .ok_or_else(|| Error::UnknownScenario(key.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub reps: usize,
    pub sample_sizes: Vec<u64>,
    pub seed: u64,
    pub options: EstimatorOptions,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every replicate's estimate in the report.
    pub keep_draws: bool,
}

impl McConfig {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            reps: s.reps,
            sample_sizes: s.sample_sizes.clone(),
            seed: s.seed,
            options: EstimatorOptions::default(),
            threads: None,
            keep_draws: false,
        }
    }
}

/// Summary of one estimator at one sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub estimator: EstimatorKind,
    pub n: u64,
    pub reps: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_psi: f64,
    pub bias: f64,
    /// Across-replicate variance of `ψ̂`, scaled by `n`.
    pub empirical_var: f64,
    /// Mean of `σ̂²`, the EIC-based variance of `√n (ψ̂ - ψ)`.
    pub mean_estimated_var: f64,
    pub var_ratio: f64,
    pub coverage: f64,
    pub ci_lo_mean: f64,
    pub ci_hi_mean: f64,
}

/// One replicate's result for one estimator; `psi` and `se` are absent when
/// the estimator failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub estimator: EstimatorKind,
    pub n: u64,
    pub rep: usize,
    pub psi: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: String,
    pub psi_true: f64,
    pub seed: u64,
    pub metrics: Vec<McMetrics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub draws: Vec<Draw>,
}

/// Generator for replicate `rep` at sample size `n`: the stream index is the
/// replicate, the key mixes the seed with `n`.
pub fn replicate_rng(seed: u64, n: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(rep as u64);
    rng
}

fn metrics(estimator: EstimatorKind, n: u64, truth: f64, draws: &[&Draw]) -> McMetrics {
    let ok: Vec<&Draw> = draws.iter().copied().filter(|d| d.psi.is_some()).collect();
    let reps = draws.len();
    let m = ok.len() as f64;
    let nf = n as f64;
    let psi: Vec<f64> = ok.iter().map(|d| d.psi.unwrap()).collect();
    let mean = psi.iter().sum::<f64>() / m;
    let var = if ok.len() > 1 {
        psi.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        f64::NAN
    };
    let est_var = ok.iter().map(|d| d.se.unwrap().powi(2)).sum::<f64>() / m;
    let covered = ok
        .iter()
        .filter(|d| d.ci_lo.unwrap() <= truth && truth <= d.ci_hi.unwrap())
        .count();
    McMetrics {
        estimator,
        n,
        reps,
        failures: reps - ok.len(),
        failure_rate: (reps - ok.len()) as f64 / reps as f64,
        mean_psi: mean,
        bias: mean - truth,
        empirical_var: var * nf,
        mean_estimated_var: est_var * nf,
        var_ratio: est_var / var,
        coverage: covered as f64 / m,
        ci_lo_mean: ok.iter().map(|d| d.ci_lo.unwrap()).sum::<f64>() / m,
        ci_hi_mean: ok.iter().map(|d| d.ci_hi.unwrap()).sum::<f64>() / m,
    }
}

fn replicate(
    fd: &FullDist,
    kinds: &[EstimatorKind],
    config: &McConfig,
    n: u64,
    rep: usize,
) -> Vec<Draw> {
    let mut rng = replicate_rng(config.seed, n, rep);
    let table = sample_observed(fd, n, &mut rng);
    let mut options = config.options.clone();
    options.lasso.seed = rng.next_u64();
    run_estimators(&table, kinds, &options)
        .into_iter()
        .map(|(estimator, r)| {
            let est = r.ok().map(|f| f.estimate);
            Draw {
                estimator,
                n,
                rep,
                psi: est.as_ref().map(|e| e.psi),
                se: est.as_ref().map(|e| e.se),
                ci_lo: est.as_ref().map(|e| e.ci_lo),
                ci_hi: est.as_ref().map(|e| e.ci_hi),
            }
        })
        .collect()
}

/// Scores `kinds` on `config.reps` independent draws from `dgp` at each
/// sample size. Results do not depend on the number of workers.
pub fn run_monte_carlo(
    name: &str,
    dgp: &Dgp,
    kinds: &[EstimatorKind],
    config: &McConfig,
) -> Result<McReport> {
    if config.reps == 0 || config.sample_sizes.is_empty() || kinds.is_empty() {
        return Err(Error::InvalidArgument(
            "Monte Carlo needs replicates, sample sizes and estimators".into(),
        ));
    }
    if config.sample_sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "sample sizes must be positive".into(),
        ));
    }
    let fd = full_dist(dgp)?;
    let truth = true_psi(&fd);
    let jobs: Vec<(u64, usize)> = config
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..config.reps).map(move |r| (n, r)))
        .collect();
    let run = || -> Vec<Vec<Draw>> {
        jobs.par_iter()
            .map(|&(n, rep)| replicate(&fd, kinds, config, n, rep))
            .collect()
    };
    let per_rep = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let draws: Vec<Draw> = per_rep.into_iter().flatten().collect();

    let mut out = Vec::new();
    for &n in &config.sample_sizes {
        for &kind in kinds {
            let sel: Vec<&Draw> = draws
                .iter()
                .filter(|d| d.n == n && d.estimator == kind)
                .collect();
            out.push(metrics(kind, n, truth, &sel));
        }
    }
    Ok(McReport {
        scenario: name.to_string(),
        psi_true: truth,
        seed: config.seed,
        metrics: out,
        draws: if config.keep_draws { draws } else { Vec::new() },
    })
}

pub fn run_scenario(scenario: &Scenario, config: &McConfig) -> Result<McReport> {
    run_monte_carlo(&scenario.key, &scenario.dgp, &scenario.estimators, config)
}
