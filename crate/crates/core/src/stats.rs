//! Empirical statistics over sample batches.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::linalg::Matrix;
use crate::special::{normal_cdf, NeumaierSum};
use crate::{Error, Result};

/// `sup_x |F_n(x) - Phi(x)|`. Ties are handled by evaluating the step
/// on both sides of each distinct value.
pub fn ks_distance_normal(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == x {
            j += 1;
        }
        let phi = normal_cdf(x);
        worst = worst.max(phi - i as f64 / n).max((j + 1) as f64 / n - phi);
        i = j + 1;
    }
    worst
}

/// Asymptotic 95% one-sample KS band `1.36 / sqrt(n)`.
pub fn ks_band(samples: usize) -> f64 {
    1.36 / (samples as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Categories after pooling.
    pub categories: usize,
}

/// Two-sample chi-square homogeneity test on count tables with possibly
/// different totals. Categories whose pooled count falls below `min_pooled`
/// are merged into one cell.
pub fn two_sample_chi_square<K: Ord + Clone>(
    a: &BTreeMap<K, u64>,
    b: &BTreeMap<K, u64>,
    min_pooled: u64,
) -> Result<ChiSquareTest> {
    let total_a: u64 = a.values().sum();
    let total_b: u64 = b.values().sum();
    if total_a == 0 || total_b == 0 {
        return Err(Error::TooFewSamples {
            found: total_a.min(total_b) as usize,
            required: 1,
        });
    }
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();

    let mut cells: Vec<(u64, u64)> = Vec::new();
    let mut rest = (0u64, 0u64);
    for key in keys {
        let ca = a.get(key).copied().unwrap_or(0);
        let cb = b.get(key).copied().unwrap_or(0);
        if ca + cb >= min_pooled {
            cells.push((ca, cb));
        } else {
            rest.0 += ca;
            rest.1 += cb;
        }
    }
    if rest.0 + rest.1 > 0 {
        cells.push(rest);
    }

    let ratio = (total_b as f64 / total_a as f64).sqrt();
    let statistic = cells
        .iter()
        .map(|&(ca, cb)| {
            let diff = ratio * ca as f64 - cb as f64 / ratio;
            diff * diff / (ca + cb) as f64
        })
        .collect::<NeumaierSum>()
        .value();
    let dof = cells.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let law = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
        law.sf(statistic)
    };
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value,
        categories: cells.len(),
    })
}

/// Compensated column means of equal-length rows.
pub fn empirical_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let r = rows.first().map_or(0, Vec::len);
    let mut sums = vec![NeumaierSum::default(); r];
    for row in rows {
        for (acc, &x) in sums.iter_mut().zip(row) {
            acc.add(x);
        }
    }
    let n = rows.len() as f64;
    sums.iter().map(|s| s.value() / n).collect()
}

/// Mean and `1/(n-1)` sample covariance, two-pass with compensated sums.
pub fn empirical_covariance(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Matrix)> {
    if rows.len() < 2 {
        return Err(Error::TooFewSamples {
            found: rows.len(),
            required: 2,
        });
    }
    let mean = empirical_mean(rows);
    let r = mean.len();
    let mut sums = vec![NeumaierSum::default(); r * r];
    for row in rows {
        if row.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                found: row.len(),
            });
        }
        for i in 0..r {
            let di = row[i] - mean[i];
            for j in 0..=i {
                sums[i * r + j].add(di * (row[j] - mean[j]));
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    let mut cov = Matrix::zeros(r);
    for i in 0..r {
        for j in 0..=i {
            let v = sums[i * r + j].value() / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}
