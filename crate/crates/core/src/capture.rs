//! Capture histories, cell tables and the cell-probability types shared by
//! every estimator.
//!
//! A capture history over `K` samples is stored as the integer
//! `Σ_k b_k · 2^(k-1)`: sample 1 is the least-significant bit. Pattern `0`
//! (never captured) is unobservable, so observed tables and distributions
//! keep a slot for it only to make indexing direct; that slot is always zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of samples.
pub const MAX_K: usize = 20;

/// Tolerance on `Σ p = 1` for the probability types.
pub const SUM_TOLERANCE: f64 = 1e-12;

pub fn check_k(k: usize) -> Result<()> {
    if (2..=MAX_K).contains(&k) {
        Ok(())
    } else {
        Err(Error::UnsupportedK(k))
    }
}

/// Indices of the observable (nonzero) patterns for `k` samples.
pub fn cells(k: usize) -> std::ops::Range<usize> {
    1..(1usize << k)
}

/// Number of observable patterns, `2^K - 1`.
pub fn n_cells(k: usize) -> usize {
    (1usize << k) - 1
}

/// Canonical index of a 0/1 capture vector, `b_1` least significant.
pub fn pattern_index(bits: &[u8]) -> Result<usize> {
    check_k(bits.len())?;
    bits.iter()
        .enumerate()
        .try_fold(0usize, |acc, (j, &b)| match b {
            0 => Ok(acc),
            1 => Ok(acc | (1 << j)),
            other => Err(Error::InvalidPattern(format!(
                "entry {} of the capture vector is {other}, expected 0 or 1",
                j + 1
            ))),
        })
}

/// Inverse of [`pattern_index`].
pub fn pattern_bits(index: usize, k: usize) -> Vec<u8> {
    (0..k).map(|j| ((index >> j) & 1) as u8).collect()
}

/// `f_I(b) = (-1)^(K + Σ b_k)`, the parity function of the highest-order
/// interaction.
pub fn parity(index: usize, k: usize) -> f64 {
    if (k + index.count_ones() as usize).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CapturePattern {
    index: u32,
    k: u8,
}

impl CapturePattern {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        check_k(k)?;
        if index >= (1 << k) {
            return Err(Error::InvalidPattern(format!(
                "index {index} does not fit in {k} samples"
            )));
        }
        Ok(Self {
            index: index as u32,
            k: k as u8,
        })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let index = pattern_index(bits)?;
        Self::new(index, bits.len())
    }

    /// Parses a string of `0`/`1` characters written `b_1` first, e.g. `"101"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidPattern(format!(
                    "unexpected character `{other}` in pattern `{s}`"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(&bits)
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    /// Whether sample `j` (1-based) captured this individual.
    pub fn captured_by(&self, j: usize) -> bool {
        j >= 1 && j <= self.k() && (self.index >> (j - 1)) & 1 == 1
    }

    pub fn bits(&self) -> Vec<u8> {
        pattern_bits(self.index(), self.k())
    }

    pub fn is_zero(&self) -> bool {
        self.index == 0
    }

    pub fn parity(&self) -> i32 {
        parity(self.index(), self.k()) as i32
    }
}

impl fmt::Display for CapturePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Counts of observed individuals per capture pattern.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTable {
    k: usize,
    /// Indexed by pattern; slot 0 is always 0.
    counts: Vec<u64>,
    n: u64,
}

impl CellTable {
    /// Builds a table from a full-length count vector (length `2^K`, entry 0
    /// must be zero).
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        check_k(k)?;
        if counts.len() != 1 << k {
            return Err(Error::InvalidArgument(format!(
                "expected {} counts for K={k}, got {}",
                1usize << k,
                counts.len()
            )));
        }
        if counts[0] != 0 {
            return Err(Error::ZeroPatternObserved);
        }
        let n = counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { k, counts, n })
    }

    /// Builds a table from `(pattern, count)` pairs. Repeated patterns add up.
    pub fn from_pairs<I>(k: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (CapturePattern, u64)>,
    {
        check_k(k)?;
        let mut counts = vec![0u64; 1 << k];
        for (pattern, count) in pairs {
            if pattern.k() != k {
                return Err(Error::KMismatch {
                    expected: k,
                    found: pattern.k(),
                });
            }
            if pattern.is_zero() && count > 0 {
                return Err(Error::ZeroPatternObserved);
            }
            counts[pattern.index()] += count;
        }
        Self::from_counts(k, counts)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    /// Full-length count vector, slot 0 included.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Nonzero patterns with zero observations.
    pub fn empty_cells(&self) -> Vec<usize> {
        cells(self.k).filter(|&i| self.counts[i] == 0).collect()
    }

    /// One pattern per observed individual, in pattern order.
    pub fn to_records(&self) -> Vec<CapturePattern> {
        cells(self.k)
            .flat_map(|i| {
                let p = CapturePattern {
                    index: i as u32,
                    k: self.k as u8,
                };
                std::iter::repeat_n(p, self.counts[i] as usize)
            })
            .collect()
    }
}

/// Tabulates individual capture histories into cell counts.
pub fn tabulate(records: &[CapturePattern]) -> Result<CellTable> {
    let first = records.first().ok_or(Error::EmptyInput)?;
    let k = first.k();
    let mut counts = vec![0u64; 1 << k];
    for r in records {
        if r.k() != k {
            return Err(Error::KMismatch {
                expected: k,
                found: r.k(),
            });
        }
        if r.is_zero() {
            return Err(Error::ZeroPatternObserved);
        }
        counts[r.index()] += 1;
    }
    CellTable::from_counts(k, counts)
}

/// Probability distribution of the observed capture pattern (conditional on
/// being captured at least once).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDist {
    k: usize,
    /// Indexed by pattern; slot 0 is always 0.
    probs: Vec<f64>,
}

impl CellDist {
    /// Validates a full-length probability vector whose slot 0 is zero.
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self> {
        check_k(k)?;
        if probs.len() != 1 << k {
            return Err(Error::InvalidArgument(format!(
                "expected {} probabilities for K={k}, got {}",
                1usize << k,
                probs.len()
            )));
        }
        if probs[0] != 0.0 {
            return Err(Error::InvalidArgument(
                "observed-data distribution must put no mass on the zero pattern".into(),
            ));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidArgument(format!(
                "probability {p} of pattern {i} is outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { k, probs })
    }

    /// Normalizes nonnegative weights over the nonzero patterns. Slot 0 of
    /// `weights` is ignored.
    pub fn from_weights(k: usize, weights: &[f64]) -> Result<Self> {
        check_k(k)?;
        if weights.len() != 1 << k {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights for K={k}, got {}",
                1usize << k,
                weights.len()
            )));
        }
        let total: f64 = weights[1..].iter().sum();
        if !(total.is_finite() && total > 0.0) || weights[1..].iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be nonnegative with a positive finite sum".into(),
            ));
        }
        let mut probs = Vec::with_capacity(weights.len());
        probs.push(0.0);
        probs.extend(weights[1..].iter().map(|w| w / total));
        Ok(Self { k, probs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Full-length probability vector, slot 0 included.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs[1..].iter().all(|&p| p > 0.0)
    }

    /// `Σ_{b≠0} P(b) g(b)` for a per-pattern function `g` (slot 0 ignored).
    pub fn expect(&self, g: &[f64]) -> f64 {
        self.probs[1..]
            .iter()
            .zip(&g[1..])
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Probability that sample `j` (1-based) did not capture.
    pub fn marginal_missed(&self, j: usize) -> f64 {
        let bit = 1usize << (j - 1);
        cells(self.k)
            .filter(|i| i & bit == 0)
            .map(|i| self.probs[i])
            .sum()
    }
}

/// Empirical distribution `counts / n` of a cell table.
pub fn empirical_dist(table: &CellTable) -> CellDist {
    let n = table.n() as f64;
    let probs = table.counts().iter().map(|&c| c as f64 / n).collect();
    CellDist {
        k: table.k(),
        probs,
    }
}

/// Distribution of the full capture history, never-captured pattern included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullDist {
    k: usize,
    probs: Vec<f64>,
}

impl FullDist {
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self> {
        check_k(k)?;
        if probs.len() != 1 << k {
            return Err(Error::InvalidArgument(format!(
                "expected {} probabilities for K={k}, got {}",
                1usize << k,
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidArgument(format!(
                "probability {p} of pattern {i} is outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        if !(probs[0] < 1.0) {
            return Err(Error::InvalidArgument(
                "the never-captured probability must be below 1".into(),
            ));
        }
        Ok(Self { k, probs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of being captured at least once, `1 - P*(0)`.
    pub fn capture_probability(&self) -> f64 {
        1.0 - self.probs[0]
    }

    /// Conditional distribution given capture.
    pub fn observed(&self) -> CellDist {
        let psi: f64 = self.probs[1..].iter().sum();
        let mut probs = Vec::with_capacity(self.probs.len());
        probs.push(0.0);
        probs.extend(self.probs[1..].iter().map(|p| p / psi));
        CellDist { k: self.k, probs }
    }
}
