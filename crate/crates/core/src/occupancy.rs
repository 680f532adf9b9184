//! Counting capacity-constrained placements.
//!
//! `M_s(j, C)` is the number of maps from `s` labelled balls to `j` labelled
//! bins with every bin receiving at most `C` balls. Singling out one bin gives
//!
//! ```text
//! M_s(j, C) = sum_{k=0}^{min(C, s)} binom(s, k) * M_{s-k}(j-1, C)
//! ```
//!
//! with `M_0(j, C) = 1` and `M_s(0, C) = 0` for `s >= 1`. The exact table
//! evaluates this with big integers. The log table evaluates the equivalent
//! exponential-generating-function form `P_j(s) = M_s(j) / s!`,
//! `P_j(s) = sum_k P_{j-1}(s-k) / k!`, with log-sum-exp accumulation.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::special::{ln_factorial, log_sum_exp};
use crate::{Error, Result};

/// Largest `N^n` the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// The triple `(n, N, C)`: `n` balls, `N` bins, capacity `C` per bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationParams {
    n: u64,
    bins: u64,
    capacity: u32,
}

impl AllocationParams {
    /// Fails when `N = 0`, `C = 0`, or `n > C N` (no admissible placement).
    pub fn new(n: u64, bins: u64, capacity: u32) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParams("bin count N must be positive".into()));
        }
        if capacity == 0 {
            return Err(Error::InvalidParams("capacity C must be positive".into()));
        }
        match bins.checked_mul(u64::from(capacity)) {
            Some(total) if n <= total => Ok(Self { n, bins, capacity }),
            Some(_) => Err(Error::Infeasible { n, bins, capacity }),
            None => Err(Error::InvalidParams("C*N overflows".into())),
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn bins(&self) -> u64 {
        self.bins
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn total_capacity(&self) -> u64 {
        self.bins * u64::from(self.capacity)
    }

    /// Average load `n/N`.
    pub fn load(&self) -> f64 {
        self.n as f64 / self.bins as f64
    }

    /// `n <= CN - 1`: at least one free slot, so the law is not degenerate.
    pub fn is_nontrivial(&self) -> bool {
        self.n < self.total_capacity()
    }
}

/// Which bin-columns a table keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    /// Every column `0..=N`.
    All,
    /// Only the last `k` columns, `N-k+1..=N`.
    Last(u64),
}

impl Retain {
    fn first_kept(self, bins: u64) -> u64 {
        match self {
            Retain::All => 0,
            Retain::Last(k) => bins.saturating_sub(k.max(1) - 1),
        }
    }
}

/// Column `j` holds entries for `0 <= s <= min(n, C j)`.
#[derive(Debug, Clone)]
pub struct CountTable<T> {
    params: AllocationParams,
    first_bin: u64,
    columns: Vec<Vec<T>>,
}

impl<T> CountTable<T> {
    pub fn params(&self) -> AllocationParams {
        self.params
    }

    /// Smallest bin count whose column is stored.
    pub fn first_bin(&self) -> u64 {
        self.first_bin
    }

    pub fn has_column(&self, bins: u64) -> bool {
        bins >= self.first_bin && bins <= self.params.bins
    }

    /// Stored entry for `(bins, balls)`; `None` when the column is not kept
    /// or `balls > min(n, C bins)`.
    pub fn get(&self, bins: u64, balls: u64) -> Option<&T> {
        if !self.has_column(bins) {
            return None;
        }
        self.columns[(bins - self.first_bin) as usize].get(balls as usize)
    }

    fn column_len(params: &AllocationParams, bins: u64) -> usize {
        (params.n.min(u64::from(params.capacity) * bins) + 1) as usize
    }
}

/// Exact table of `M_s(j, C)`.
pub type ExactCountTable = CountTable<BigUint>;

impl ExactCountTable {
    pub fn build(params: AllocationParams, retain: Retain) -> Self {
        let cap = params.capacity as usize;
        let first_bin = retain.first_kept(params.bins);
        let mut columns = Vec::new();
        let mut prev: Vec<BigUint> = vec![BigUint::one()];
        if first_bin == 0 {
            columns.push(prev.clone());
        }
        // binom(s, k) for k <= C, rebuilt per row
        for j in 1..=params.bins {
            let len = Self::column_len(&params, j);
            let mut col = Vec::with_capacity(len);
            for s in 0..len {
                let mut acc = BigUint::zero();
                let mut binom = BigUint::one();
                for k in 0..=cap.min(s) {
                    if k > 0 {
                        binom = binom * BigUint::from(s - k + 1) / BigUint::from(k);
                    }
                    if let Some(m) = prev.get(s - k) {
                        acc += &binom * m;
                    }
                }
                col.push(acc);
            }
            if j >= first_bin {
                columns.push(col.clone());
            }
            prev = col;
        }
        Self {
            params,
            first_bin,
            columns,
        }
    }

    /// `M_balls(bins, C)`, zero when infeasible; panics if the column is not
    /// retained.
    pub fn count(&self, bins: u64, balls: u64) -> BigUint {
        assert!(self.has_column(bins), "column {bins} not retained");
        self.get(bins, balls).cloned().unwrap_or_else(BigUint::zero)
    }
}

/// Log-domain table. Stores `ln(M_s(j, C) / s!)`; `ln_count` adds `ln s!`.
pub type LogCountTable = CountTable<f64>;

impl LogCountTable {
    pub fn build(params: AllocationParams, retain: Retain) -> Self {
        let cap = params.capacity as usize;
        let first_bin = retain.first_kept(params.bins);
        let neg_ln_fact: Vec<f64> = (0..=cap as u64).map(|k| -ln_factorial(k)).collect();
        let mut columns = Vec::new();
        let mut prev: Vec<f64> = vec![0.0];
        if first_bin == 0 {
            columns.push(prev.clone());
        }
        let mut terms = Vec::with_capacity(cap + 1);
        for j in 1..=params.bins {
            let len = Self::column_len(&params, j);
            let mut col = Vec::with_capacity(len);
            for s in 0..len {
                terms.clear();
                for k in 0..=cap.min(s) {
                    if let Some(p) = prev.get(s - k) {
                        terms.push(p + neg_ln_fact[k]);
                    }
                }
                col.push(log_sum_exp(&terms));
            }
            if j >= first_bin {
                columns.push(col.clone());
            }
            prev = col;
        }
        Self {
            params,
            first_bin,
            columns,
        }
    }

    /// `ln(M_balls(bins) / balls!)`, `-inf` when infeasible.
    pub fn ln_egf(&self, bins: u64, balls: u64) -> f64 {
        assert!(self.has_column(bins), "column {bins} not retained");
        self.get(bins, balls).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// `ln M_balls(bins, C)`, `-inf` when infeasible.
    pub fn ln_count(&self, bins: u64, balls: u64) -> f64 {
        let v = self.ln_egf(bins, balls);
        if v == f64::NEG_INFINITY {
            v
        } else {
            ln_factorial(balls) + v
        }
    }

    /// Number of stored entries, for budget accounting.
    pub fn entries(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }
}

/// Exact `M_n(N, C)`, computed with two rolling columns.
pub fn count_placements(params: AllocationParams) -> BigUint {
    ExactCountTable::build(params, Retain::Last(1)).count(params.bins, params.n)
}

/// Full log-domain table `ln M_s(j, C)` for `0 <= j <= N`.
pub fn log_count_table(params: AllocationParams) -> LogCountTable {
    LogCountTable::build(params, Retain::All)
}

/// Exact law of the full occupancy histogram `(N_0, ..., N_C)`, where
/// `N_j` is the number of bins holding `j` balls, from enumerating every one
/// of the `N^n` placements.
#[derive(Debug, Clone)]
pub struct OccupancyEnumeration {
    pub params: AllocationParams,
    /// Histogram -> number of admissible placements producing it.
    pub histograms: BTreeMap<Vec<u32>, u64>,
    /// Number of admissible placements, `M_n(N, C)`.
    pub admissible: u64,
}

fn check_enumerable(params: &AllocationParams) -> Result<u64> {
    let mut total: u64 = 1;
    for _ in 0..params.n {
        total = total.saturating_mul(params.bins);
        if total > BRUTE_FORCE_LIMIT {
            return Err(Error::Budget {
                what: "brute-force enumeration N^n",
                required: (params.bins as f64).powf(params.n as f64),
                limit: BRUTE_FORCE_LIMIT as f64,
            });
        }
    }
    Ok(total)
}

/// Enumerates all `N^n` placements (refusing when `N^n > 10^7`).
pub fn enumerate_placements(params: AllocationParams) -> Result<OccupancyEnumeration> {
    let total = check_enumerable(&params)?;
    let n = params.n as usize;
    let bins = params.bins as usize;
    let cap = params.capacity as usize;
    let mut digits = vec![0usize; n];
    let mut loads = vec![0usize; bins];
    loads[0] = n;
    let mut histograms: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    let mut admissible = 0u64;
    let mut hist = vec![0u32; cap + 1];
    for index in 0..total {
        if index > 0 {
            // odometer increment; loads follow the changed digits
            let mut pos = 0;
            loop {
                loads[digits[pos]] -= 1;
                digits[pos] += 1;
                if digits[pos] == bins {
                    digits[pos] = 0;
                    loads[0] += 1;
                    pos += 1;
                } else {
                    loads[digits[pos]] += 1;
                    break;
                }
            }
        }
        if loads.iter().all(|&l| l <= cap) {
            hist.iter_mut().for_each(|h| *h = 0);
            for &l in &loads {
                hist[l] += 1;
            }
            admissible += 1;
            *histograms.entry(hist.clone()).or_insert(0) += 1;
        }
    }
    Ok(OccupancyEnumeration {
        params,
        histograms,
        admissible,
    })
}

impl OccupancyEnumeration {
    /// Exact law of `(X_{m_1}, ..., X_{m_r})`.
    pub fn project(&self, profile: &[u32]) -> BTreeMap<Vec<u64>, BigRational> {
        let mut counts: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
        for (hist, &c) in &self.histograms {
            let x: Vec<u64> = profile
                .iter()
                .map(|&m| hist.get(m as usize).copied().unwrap_or(0) as u64)
                .collect();
            *counts.entry(x).or_insert(0) += c;
        }
        let total = BigRational::from_integer(self.admissible.into());
        counts
            .into_iter()
            .map(|(x, c)| (x, BigRational::from_integer(c.into()) / &total))
            .collect()
    }

    /// Exact `E f(histogram)` for an integer-valued `f`.
    pub fn expectation<F>(&self, f: F) -> BigRational
    where
        F: Fn(&[u32]) -> num_bigint::BigInt,
    {
        let mut acc = num_bigint::BigInt::zero();
        for (hist, &c) in &self.histograms {
            acc += f(hist) * num_bigint::BigInt::from(c);
        }
        BigRational::new(acc, self.admissible.into())
    }
}

/// Exact probability table of `(X_{m_1}, ..., X_{m_r})` by enumeration.
pub fn brute_force_occupancy_distribution(
    params: AllocationParams,
    profile: &[u32],
) -> Result<BTreeMap<Vec<u64>, BigRational>> {
    if profile.iter().any(|&m| m > params.capacity) {
        return Err(Error::InvalidParams("profile level exceeds capacity".into()));
    }
    Ok(enumerate_placements(params)?.project(profile))
}
