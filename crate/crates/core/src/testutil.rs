//! Reference distributions and helpers shared by the unit tests. The
//! distributions here are built directly from their defining formulas so they
//! can serve as oracles for the simulation module.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::capture::{cells, CellDist, CellTable, FullDist};

/// Pattern index of each printed coefficient `α_0..α_7`.
pub const ALPHA_MASKS: [usize; 8] = [0, 1, 2, 4, 6, 5, 3, 7];
/// Pattern index of each printed column `P(0,0,1), P(0,1,0), …, P(1,1,1)`.
pub const LABEL_CELLS: [usize; 7] = [4, 2, 6, 1, 5, 3, 7];

fn term(b: usize, mask: usize) -> f64 {
    (b & mask == mask) as u8 as f64
}

pub fn additive_k3(alpha: [f64; 8]) -> FullDist {
    let probs = (0..8)
        .map(|b| {
            ALPHA_MASKS
                .iter()
                .zip(alpha)
                .map(|(&m, a)| a * term(b, m))
                .sum()
        })
        .collect();
    FullDist::new(3, probs).unwrap()
}

pub fn loglinear_k3(alpha: [f64; 8]) -> FullDist {
    let raw: Vec<f64> = (0..8)
        .map(|b| {
            ALPHA_MASKS
                .iter()
                .zip(alpha)
                .skip(1)
                .map(|(&m, a)| a * term(b, m))
                .sum::<f64>()
                .exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    FullDist::new(3, raw.iter().map(|r| r / total).collect()).unwrap()
}

/// `B1 ~ Bern(p1)`, `B2 | b1 ~ Bern(p2[b1])`, `B3 | b1,b2 ~ Bern(p3[2·b1 + b2])`.
pub fn sequential_k3(p1: f64, p2: [f64; 2], p3: [f64; 4]) -> FullDist {
    let probs = (0..8usize)
        .map(|b| {
            let (b1, b2, b3) = (b & 1, (b >> 1) & 1, (b >> 2) & 1);
            let bern = |p: f64, x: usize| if x == 1 { p } else { 1.0 - p };
            bern(p1, b1) * bern(p2[b1], b2) * bern(p3[2 * b1 + b2], b3)
        })
        .collect();
    FullDist::new(3, probs).unwrap()
}

pub fn linear_5_1() -> FullDist {
    additive_k3([0.0725, 0.03, 0.01, 0.04, 0.01, 0.02, 0.02, 0.0])
}

pub fn independence_5_5() -> FullDist {
    sequential_k3(0.1, [0.2, 0.2], [0.3, 0.3, 0.25, 0.25])
}

pub fn cond_independence_5_6() -> FullDist {
    sequential_k3(0.1, [0.15, 0.2], [0.2, 0.2, 0.25, 0.25])
}

pub fn all_violated_6_5() -> FullDist {
    loglinear_k3([-1.1835, -1.0, -1.0, -1.0, -1.5, -1.0, 2.0, 1.0])
}

/// A printed observed-data table, renormalized after rounding.
pub fn printed_k3(row: [f64; 7]) -> CellDist {
    let mut w = vec![0.0; 8];
    for (c, p) in LABEL_CELLS.iter().zip(row) {
        w[*c] = p;
    }
    CellDist::from_weights(3, &w).unwrap()
}

/// Strictly positive observed-data distributions.
pub fn interior_dist(k: usize) -> impl Strategy<Value = CellDist> {
    proptest::collection::vec(0.2f64..1.0, (1 << k) - 1).prop_map(move |w| {
        let mut full = vec![0.0];
        full.extend(w);
        CellDist::from_weights(k, &full).unwrap()
    })
}

/// Mean-zero perturbation directions over the nonzero patterns.
pub fn direction(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, (1 << k) - 1).prop_map(|v| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let mut h = vec![0.0];
        h.extend(v.iter().map(|x| x - mean));
        h
    })
}

/// Compares the directional derivative of `psi` at `p` along `h` (central
/// finite difference) with `Σ_b h(b) D*(b)`.
pub fn check_gateaux(
    p: &CellDist,
    h: &[f64],
    eic: &[f64],
    psi: impl Fn(&CellDist) -> f64,
) -> Result<(), TestCaseError> {
    let eps = 1e-6;
    let shifted = |s: f64| {
        let mut q: Vec<f64> = p.probs().iter().zip(h).map(|(a, d)| a + s * d).collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= total);
        q[0] = 0.0;
        CellDist::new(p.k(), q).unwrap()
    };
    let numeric = (psi(&shifted(eps)) - psi(&shifted(-eps))) / (2.0 * eps);
    let analytic: f64 = cells(p.k()).map(|i| h[i] * eic[i]).sum();
    let tol = 1e-5 * (1.0 + analytic.abs());
    prop_assert!(
        (numeric - analytic).abs() < tol,
        "finite difference {numeric} vs EIC {analytic}"
    );
    Ok(())
}

/// Sequential-binomial multinomial draw, kept here so module tests do not
/// depend on the simulation code they may be checking.
pub fn draw(dist: &CellDist, n: u64, seed: u64) -> CellTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = n;
    let mut mass = 1.0;
    let mut counts = vec![0u64; dist.probs().len()];
    for i in cells(dist.k()) {
        let p = (dist.prob(i) / mass).clamp(0.0, 1.0);
        let c = if left == 0 {
            0
        } else {
            Binomial::new(left, p).unwrap().sample(&mut rng)
        };
        counts[i] = c;
        left -= c;
        mass -= dist.prob(i);
    }
    CellTable::from_counts(dist.k(), counts).unwrap()
}
