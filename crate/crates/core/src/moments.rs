//! Joint factorial moments of occupancy counts.
//!
//! Choosing which `k_i` bins hold exactly `m_i` balls gives the exact identity
//!
//! ```text
//! E prod_i [X_{m_i}]_{k_i} = [N]_s * n! / ((n-t)! prod_i (m_i!)^{k_i})
//!                            * M_{n-t}(N-s, C) / M_n(N, C)
//! ```
//!
//! with `s = sum k_i` and `t = sum k_i m_i`. Its large-`N` form is
//!
//! ```text
//! prod_i mu_i^{k_i} * exp(-(sum k_i (m_i - n/N))^2 / (2 N var W) - s^2 / (2N))
//! ```
//!
//! with `mu_i = N lambda_0^{m_i} / (g(lambda_0) m_i!)`.

use std::io::Write;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::linalg::Matrix;
use crate::occupancy::{AllocationParams, ExactCountTable, LogCountTable, Retain};
use crate::special::{ln_factorial, ln_falling_int};
use crate::tilted::TiltSolution;
use crate::{Error, Result};

/// Largest number of grid points a comparison will evaluate.
pub const MAX_GRID_POINTS: usize = 1_000_000;
/// Largest number of log-table entries a moment engine will build.
pub const MAX_TABLE_ENTRIES: f64 = 1e9;

/// Moment order `k = (k_1, ..., k_r)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct MomentOrder {
    pub k: Vec<u32>,
}

impl MomentOrder {
    pub fn new(k: Vec<u32>) -> Self {
        Self { k }
    }

    pub fn zero(r: usize) -> Self {
        Self { k: vec![0; r] }
    }

    /// Unit vector `e_i`.
    pub fn unit(r: usize, i: usize) -> Self {
        let mut k = vec![0; r];
        k[i] = 1;
        Self { k }
    }

    /// `s = sum k_i`.
    pub fn total(&self) -> u64 {
        self.k.iter().map(|&x| u64::from(x)).sum()
    }

    /// `t = sum k_i m_i`.
    pub fn balls(&self, m: &[u32]) -> u64 {
        self.k
            .iter()
            .zip(m)
            .map(|(&k, &mi)| u64::from(k) * u64::from(mi))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanSource {
    Exact,
    Asymptotic,
}

/// Target fill levels `m` and their means `mu_i = E X_{m_i}`.
#[derive(Debug, Clone, Serialize)]
pub struct OccupancyProfile {
    pub m: Vec<u32>,
    pub mu: Vec<f64>,
    pub source: MeanSource,
}

/// Levels must be non-empty, distinct and at most `C`.
pub fn validate_levels(m: &[u32], capacity: u32) -> Result<()> {
    if m.is_empty() {
        return Err(Error::InvalidParams("profile needs at least one level".into()));
    }
    if let Some(&bad) = m.iter().find(|&&x| x > capacity) {
        return Err(Error::InvalidParams(format!(
            "level {bad} exceeds capacity {capacity}"
        )));
    }
    let mut sorted = m.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParams("profile levels must be distinct".into()));
    }
    Ok(())
}

impl OccupancyProfile {
    /// Exact means `E X_{m_i}` from the counting identity with `k = e_i`.
    pub fn exact(m: &[u32], engine: &LogMomentEngine) -> Result<Self> {
        validate_levels(m, engine.params().capacity())?;
        let mu = (0..m.len())
            .map(|i| engine.ln_moment(m, &MomentOrder::unit(m.len(), i)).map(f64::exp))
            .collect::<Result<_>>()?;
        Ok(Self {
            m: m.to_vec(),
            mu,
            source: MeanSource::Exact,
        })
    }

    /// `mu_i = N lambda_0^{m_i} / (g(lambda_0) m_i!)`.
    pub fn asymptotic(m: &[u32], tilt: &TiltSolution) -> Result<Self> {
        validate_levels(m, tilt.capacity())?;
        Ok(Self {
            m: m.to_vec(),
            mu: m.iter().map(|&mi| asymptotic_mean(mi, tilt)).collect(),
            source: MeanSource::Asymptotic,
        })
    }

    pub fn r(&self) -> usize {
        self.m.len()
    }
}

pub fn ln_asymptotic_mean(level: u32, tilt: &TiltSolution) -> f64 {
    let law = &tilt.law;
    (tilt.bins as f64).ln() + f64::from(level) * law.lambda().ln()
        - law.ln_g()
        - ln_factorial(u64::from(level))
}

pub fn asymptotic_mean(level: u32, tilt: &TiltSolution) -> f64 {
    ln_asymptotic_mean(level, tilt).exp()
}

fn check_order(m: &[u32], order: &MomentOrder) -> Result<()> {
    if order.k.len() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            found: order.k.len(),
        });
    }
    Ok(())
}

/// Exact rational moments from a full big-integer table.
#[derive(Debug, Clone)]
pub struct ExactMomentEngine {
    table: ExactCountTable,
}

impl ExactMomentEngine {
    pub fn new(params: AllocationParams) -> Self {
        Self {
            table: ExactCountTable::build(params, Retain::All),
        }
    }

    pub fn params(&self) -> AllocationParams {
        self.table.params()
    }

    pub fn table(&self) -> &ExactCountTable {
        &self.table
    }

    /// `E prod_i [X_{m_i}]_{k_i}` as an exact rational; zero when the order
    /// is infeasible.
    pub fn moment(&self, m: &[u32], order: &MomentOrder) -> Result<BigRational> {
        validate_levels(m, self.params().capacity())?;
        check_order(m, order)?;
        let params = self.params();
        let (n, bins) = (params.n(), params.bins());
        let s = order.total();
        let t = order.balls(m);
        if s > bins || t > n {
            return Ok(BigRational::zero());
        }
        let rest = self.table.count(bins - s, n - t);
        if rest.is_zero() {
            return Ok(BigRational::zero());
        }
        let falling = |top: u64, len: u64| -> BigUint {
            (0..len).fold(BigUint::one(), |acc, i| acc * BigUint::from(top - i))
        };
        let numerator = falling(bins, s) * falling(n, t) * rest;
        let mut denominator = self.table.count(bins, n);
        for (&k, &mi) in order.k.iter().zip(m) {
            let fact = falling(u64::from(mi), u64::from(mi));
            for _ in 0..k {
                denominator *= &fact;
            }
        }
        Ok(BigRational::new(
            BigInt::from(numerator),
            BigInt::from(denominator),
        ))
    }
}

/// Log-domain moments from the last `max_order_sum + 1` table columns.
#[derive(Debug, Clone)]
pub struct LogMomentEngine {
    table: LogCountTable,
    max_order_sum: u64,
}

impl LogMomentEngine {
    /// Refuses when the table would exceed `MAX_TABLE_ENTRIES`.
    pub fn new(params: AllocationParams, max_order_sum: u64) -> Result<Self> {
        let work = params.bins() as f64 * (params.n() as f64 + 1.0);
        if work > MAX_TABLE_ENTRIES {
            return Err(Error::Budget {
                what: "count table entries N*(n+1)",
                required: work,
                limit: MAX_TABLE_ENTRIES,
            });
        }
        let max_order_sum = max_order_sum.min(params.bins());
        Ok(Self {
            table: LogCountTable::build(params, Retain::Last(max_order_sum + 1)),
            max_order_sum,
        })
    }

    pub fn params(&self) -> AllocationParams {
        self.table.params()
    }

    pub fn max_order_sum(&self) -> u64 {
        self.max_order_sum
    }

    /// `ln E prod_i [X_{m_i}]_{k_i}`, `-inf` when the moment vanishes.
    ///
    /// In terms of `P_j(s) = M_s(j)/s!` the factorials cancel:
    /// `ln [N]_s - sum k_i ln m_i! + ln P_{N-s}(n-t) - ln P_N(n)`.
    pub fn ln_moment(&self, m: &[u32], order: &MomentOrder) -> Result<f64> {
        validate_levels(m, self.params().capacity())?;
        check_order(m, order)?;
        let params = self.params();
        let (n, bins) = (params.n(), params.bins());
        let s = order.total();
        let t = order.balls(m);
        if s > bins || t > n {
            return Ok(f64::NEG_INFINITY);
        }
        if s > self.max_order_sum {
            return Err(Error::Budget {
                what: "moment order sum beyond retained table columns",
                required: s as f64,
                limit: self.max_order_sum as f64,
            });
        }
        let rest = self.table.ln_egf(bins - s, n - t);
        if rest == f64::NEG_INFINITY {
            return Ok(rest);
        }
        let level_factorials: f64 = order
            .k
            .iter()
            .zip(m)
            .map(|(&k, &mi)| f64::from(k) * ln_factorial(u64::from(mi)))
            .sum();
        Ok(ln_falling_int(bins, s) - level_factorials + rest - self.table.ln_egf(bins, n))
    }
}

/// Lemma-type asymptotic `ln E prod [X_{m_i}]_{k_i}`.
pub fn asymptotic_factorial_moment(m: &[u32], order: &MomentOrder, tilt: &TiltSolution) -> Result<f64> {
    check_order(m, order)?;
    let bins = tilt.bins as f64;
    let load = tilt.load;
    let mut ln_mu = 0.0;
    let mut drift = 0.0;
    for (&k, &mi) in order.k.iter().zip(m) {
        let k = f64::from(k);
        if k > 0.0 {
            ln_mu += k * ln_asymptotic_mean(mi, tilt);
        }
        drift += k * (f64::from(mi) - load);
    }
    let s = order.total() as f64;
    Ok(ln_mu - drift * drift / (2.0 * tilt.n_var()) - s * s / (2.0 * bins))
}

/// `(N / lambda_0)^{2/3}`, the scale below which `sum k_i` keeps the
/// asymptotic form valid.
pub fn lemma_order_scale(tilt: &TiltSolution) -> f64 {
    (tilt.bins as f64 / tilt.lambda0()).powf(2.0 / 3.0)
}

/// Exact covariance of `(X_{m_1}, ..., X_{m_r})` from the moments
/// `E X_i`, `E [X_i]_2` and `E X_i X_j`.
pub fn exact_covariance(engine: &LogMomentEngine, m: &[u32]) -> Result<(Vec<f64>, Matrix)> {
    let r = m.len();
    let mu: Vec<f64> = (0..r)
        .map(|i| engine.ln_moment(m, &MomentOrder::unit(r, i)).map(f64::exp))
        .collect::<Result<_>>()?;
    let mut cov = Matrix::zeros(r);
    for i in 0..r {
        for j in 0..=i {
            let mut k = vec![0; r];
            k[i] += 1;
            k[j] += 1;
            let second = engine.ln_moment(m, &MomentOrder::new(k))?.exp();
            let value = if i == j {
                second + mu[i] - mu[i] * mu[i]
            } else {
                second - mu[i] * mu[j]
            };
            cov[(i, j)] = value;
            cov[(j, i)] = value;
        }
    }
    Ok((mu, cov))
}

/// A finite set of moment orders.
#[derive(Debug, Clone)]
pub struct KGrid {
    r: usize,
    points: Vec<MomentOrder>,
}

impl KGrid {
    /// All `k` with `0 <= k_i <= upper_i`.
    pub fn boxed(upper: &[u32]) -> Result<Self> {
        let lo = vec![0u32; upper.len()];
        Self::rectangle(&lo, upper)
    }

    /// All `k` with `lo_i <= k_i <= hi_i`.
    pub fn rectangle(lo: &[u32], hi: &[u32]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                found: hi.len(),
            });
        }
        let size: f64 = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| if b >= a { f64::from(b - a + 1) } else { 0.0 })
            .product();
        if size > MAX_GRID_POINTS as f64 {
            return Err(Error::Budget {
                what: "moment grid points",
                required: size,
                limit: MAX_GRID_POINTS as f64,
            });
        }
        let mut points = Vec::new();
        if size > 0.0 {
            let mut k = lo.to_vec();
            loop {
                points.push(MomentOrder::new(k.clone()));
                let mut pos = 0;
                loop {
                    if pos == k.len() {
                        return Ok(Self { r: lo.len(), points });
                    }
                    if k[pos] < hi[pos] {
                        k[pos] += 1;
                        break;
                    }
                    k[pos] = lo[pos];
                    pos += 1;
                }
            }
        }
        Ok(Self { r: lo.len(), points })
    }

    /// All `k` with `sum k_i <= max_sum`.
    pub fn simplex(r: usize, max_sum: u32) -> Result<Self> {
        let upper = vec![max_sum; r];
        let full = Self::rectangle(&vec![0; r], &upper)?;
        Ok(Self {
            r,
            points: full
                .points
                .into_iter()
                .filter(|k| k.total() <= u64::from(max_sum))
                .collect(),
        })
    }

    /// Integer points of a real box, clipped at zero.
    pub fn from_domain(lo: &[f64], hi: &[f64]) -> Result<Self> {
        let lo_i: Vec<u32> = lo.iter().map(|x| x.max(0.0).ceil() as u32).collect();
        let hi_i: Vec<u32> = hi.iter().map(|x| x.max(0.0).floor() as u32).collect();
        Self::rectangle(&lo_i, &hi_i)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn points(&self) -> &[MomentOrder] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_total(&self) -> u64 {
        self.points.iter().map(MomentOrder::total).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub k: Vec<u32>,
    pub exact_log: f64,
    pub asymptotic_log: f64,
    /// `|asymptotic / exact - 1|`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentGrid {
    pub m: Vec<u32>,
    pub rows: Vec<GridRow>,
    pub max_rel_error: f64,
    /// Points with `sum k_i > (N/lambda_0)^{2/3}`.
    pub outside_lemma_scale: usize,
}

impl MomentGrid {
    /// `k_1,...,k_r,exact_log,asymptotic_log,rel_error`, then a summary
    /// comment line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.m.len())
            .map(|i| format!("k_{i}"))
            .chain(["exact_log", "asymptotic_log", "rel_error"].map(String::from))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let ks: Vec<String> = row.k.iter().map(u32::to_string).collect();
            writeln!(
                out,
                "{},{:.15e},{:.15e},{:.6e}",
                ks.join(","),
                row.exact_log,
                row.asymptotic_log,
                row.rel_error
            )?;
        }
        writeln!(
            out,
            "# max_rel_error={:.6e} points={} outside_lemma_scale={}",
            self.max_rel_error,
            self.rows.len(),
            self.outside_lemma_scale
        )
    }
}

fn relative_error(exact_log: f64, asymptotic_log: f64) -> f64 {
    if exact_log == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    (asymptotic_log - exact_log).exp_m1().abs()
}

/// Exact against asymptotic moments over a grid; parallel over points.
pub fn moment_comparison_grid(
    engine: &LogMomentEngine,
    m: &[u32],
    tilt: &TiltSolution,
    grid: &KGrid,
) -> Result<MomentGrid> {
    if grid.r() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            found: grid.r(),
        });
    }
    if grid.max_total() > engine.max_order_sum() {
        return Err(Error::Budget {
            what: "grid order sum beyond moment engine columns",
            required: grid.max_total() as f64,
            limit: engine.max_order_sum() as f64,
        });
    }
    let rows: Vec<GridRow> = grid
        .points()
        .par_iter()
        .map(|order| {
            let exact_log = engine.ln_moment(m, order)?;
            let asymptotic_log = asymptotic_factorial_moment(m, order, tilt)?;
            Ok(GridRow {
                k: order.k.clone(),
                exact_log,
                asymptotic_log,
                rel_error: relative_error(exact_log, asymptotic_log),
            })
        })
        .collect::<Result<_>>()?;
    let max_rel_error = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let scale = lemma_order_scale(tilt);
    let outside_lemma_scale = grid
        .points()
        .iter()
        .filter(|k| k.total() as f64 > scale)
        .count();
    Ok(MomentGrid {
        m: m.to_vec(),
        rows,
        max_rel_error,
        outside_lemma_scale,
    })
}

/// `ln [x]_k` by direct summation, with the approximation
/// `k ln x - k^2 / (2x)` alongside.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FallingFactorial {
    pub exact_ln: f64,
    pub approx_ln: f64,
}

pub fn log_falling_factorial(x: f64, k: u64) -> Result<FallingFactorial> {
    if k == 0 {
        return Ok(FallingFactorial {
            exact_ln: 0.0,
            approx_ln: 0.0,
        });
    }
    if !(x > (k - 1) as f64) {
        return Err(Error::FallingFactorialDomain { x, k });
    }
    let kf = k as f64;
    let ln_x = x.ln();
    let correction: f64 = (1..k).map(|i| (-(i as f64) / x).ln_1p()).sum();
    Ok(FallingFactorial {
        exact_ln: kf * ln_x + correction,
        approx_ln: kf * ln_x - kf * kf / (2.0 * x),
    })
}

/// Supremum over a grid of `E prod_{i in R} [X_i]_{k_i} / prod_{i in R} [mu_i]_{k_i}`
/// for one subset `R`.
#[derive(Debug, Clone, Serialize)]
pub struct SubsetBound {
    pub subset: Vec<usize>,
    pub sup_ratio: f64,
    pub argmax: Vec<u32>,
    /// Points skipped because some `[mu_i]_{k_i}` has a non-positive factor.
    pub skipped: usize,
    pub exceeds_bound: bool,
}

/// One row per non-empty subset of coordinates, using the profile's means.
pub fn overall_boundedness_check(
    engine: &LogMomentEngine,
    profile: &OccupancyProfile,
    grid: &KGrid,
    bound: f64,
) -> Result<Vec<SubsetBound>> {
    let r = profile.r();
    if grid.r() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: grid.r(),
        });
    }
    if r >= 20 {
        return Err(Error::InvalidParams("too many coordinates for subset sweep".into()));
    }
    (1u32..(1 << r))
        .map(|mask| {
            let subset: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
            let mut projected: Vec<Vec<u32>> = grid
                .points()
                .iter()
                .map(|k| subset.iter().map(|&i| k.k[i]).collect())
                .collect();
            projected.sort_unstable();
            projected.dedup();
            let sub_m: Vec<u32> = subset.iter().map(|&i| profile.m[i]).collect();
            let mut sup = f64::NEG_INFINITY;
            let mut argmax = vec![0; subset.len()];
            let mut skipped = 0;
            for k in projected {
                let mut denominator = 0.0;
                let mut defined = true;
                for (&i, &ki) in subset.iter().zip(&k) {
                    match log_falling_factorial(profile.mu[i], u64::from(ki)) {
                        Ok(f) => denominator += f.exact_ln,
                        Err(_) => defined = false,
                    }
                }
                if !defined {
                    skipped += 1;
                    continue;
                }
                let ratio = (engine.ln_moment(&sub_m, &MomentOrder::new(k.clone()))? - denominator).exp();
                if ratio > sup {
                    sup = ratio;
                    argmax = k;
                }
            }
            Ok(SubsetBound {
                subset,
                sup_ratio: sup,
                argmax,
                skipped,
                exceeds_bound: sup > bound,
            })
        })
        .collect()
}
