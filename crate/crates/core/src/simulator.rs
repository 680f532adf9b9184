//! Exact samplers of uniform capacity-respecting placements.
//!
//! Two methods, both exact:
//!
//! - sequential: bin `j` (of `j` remaining, with `s` balls left) receives `k`
//!   balls with probability `binom(s, k) M_{s-k}(j-1) / M_s(j)`, read off the
//!   full log-domain count table;
//! - rejection: iid `W(lambda_0)` loads, accepted when they sum to `n`.
//!
//! Sample `i` draws from ChaCha8 seeded with `seed` on stream `i`, so a batch
//! depends only on `(seed, config)` and never on the worker count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovModel;
use crate::linalg::Matrix;
use crate::moments::validate_levels;
use crate::occupancy::{AllocationParams, LogCountTable, Retain};
use crate::special::ln_factorial;
use crate::stats::{empirical_covariance, empirical_mean, ks_band, ks_distance_normal};
use crate::tilted::TiltSolution;
use crate::{Error, Result};

/// Guard on `N n C` for the full count table.
pub const MAX_TABLE_WORK: f64 = 1e9;
/// Guard on the projected number of rejection attempts.
pub const MAX_REJECTION_ATTEMPTS: f64 = 1e9;
/// Fewest samples accepted by `normality_report`.
pub const MIN_REPORT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    SequentialExact,
    Rejection,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SamplerConfig {
    pub params: AllocationParams,
    pub method: SamplerMethod,
    pub seed: u64,
    pub samples: usize,
    /// Thread count; `0` means available parallelism.
    pub workers: usize,
}

impl SamplerConfig {
    fn check(&self, method: SamplerMethod) -> Result<()> {
        if self.method != method {
            return Err(Error::InvalidParams(format!(
                "config asks for {:?}, called the {:?} sampler",
                self.method, method
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidParams("sample count must be positive".into()));
        }
        Ok(())
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Projected rejection acceptance versus the observed one.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AcceptanceReport {
    pub attempts: u64,
    pub accepted: u64,
    pub rate: f64,
    /// `1 / sqrt(2 pi N var W)`.
    pub predicted: f64,
    /// Binomial standard error of `rate` at the predicted value.
    pub sigma: f64,
}

impl AcceptanceReport {
    pub fn z_score(&self) -> f64 {
        (self.rate - self.predicted) / self.sigma
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleBatch {
    pub config: SamplerConfig,
    pub m: Vec<u32>,
    /// Per sample, the number of bins holding `j` balls for `j = 0..=C`.
    pub histograms: Vec<Vec<u64>>,
    /// Per sample, `(X_{m_1}, ..., X_{m_r})`.
    pub raw: Vec<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub standardized: Option<Vec<Vec<f64>>>,
    pub acceptance: Option<AcceptanceReport>,
}

impl SampleBatch {
    fn from_histograms(config: SamplerConfig, m: &[u32], histograms: Vec<Vec<u64>>) -> Self {
        let raw = histograms
            .iter()
            .map(|h| m.iter().map(|&mi| h[mi as usize] as f64).collect())
            .collect();
        Self {
            config,
            m: m.to_vec(),
            histograms,
            raw,
            mu: None,
            standardized: None,
            acceptance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Frequency of each full occupancy histogram.
    pub fn occupancy_law(&self) -> BTreeMap<Vec<u64>, u64> {
        let mut law = BTreeMap::new();
        for h in &self.histograms {
            *law.entry(h.clone()).or_insert(0) += 1;
        }
        law
    }

    /// One row per sample: `X_{m_i}` columns, then `z_i` when standardized.
    /// `preamble` lines are written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let mut header: Vec<String> = self.m.iter().map(|m| format!("X_{m}")).collect();
        if self.standardized.is_some() {
            header.extend((1..=self.m.len()).map(|i| format!("z_{i}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for (i, row) in self.raw.iter().enumerate() {
            let mut cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            if let Some(z) = &self.standardized {
                cells.extend(z[i].iter().map(|x| format!("{x}")));
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn in_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParams(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// `P(k) = P_{j-1}(s-k) / (k! P_j(s))` for the next bin of `j` with `s`
/// balls left, `k = 0..=min(C, s)`.
pub fn conditional_load_law(table: &LogCountTable, bins: u64, balls: u64) -> Vec<f64> {
    let cap = u64::from(table.params().capacity());
    let here = table.ln_egf(bins, balls);
    (0..=cap.min(balls))
        .map(|k| (table.ln_egf(bins - 1, balls - k) - ln_factorial(k) - here).exp())
        .collect()
}

/// Walks the bins `N, N-1, ..., 1`, handing each drawn load to `visit`.
fn sequential_loads(table: &LogCountTable, rng: &mut ChaCha8Rng, mut visit: impl FnMut(usize)) {
    let params = table.params();
    let mut left = params.n();
    for j in (1..=params.bins()).rev() {
        let law = conditional_load_law(table, j, left);
        let total: f64 = law.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = law.len() - 1;
        for (k, p) in law.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = k;
                break;
            }
        }
        // rounding can land on a zero-probability tail
        while law[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        visit(pick);
        left -= pick as u64;
    }
    debug_assert_eq!(left, 0);
}

/// Draws from the sequential conditional law.
pub fn sample_sequential_exact(config: SamplerConfig, m: &[u32]) -> Result<SampleBatch> {
    config.check(SamplerMethod::SequentialExact)?;
    let params = config.params;
    validate_levels(m, params.capacity())?;
    let work = params.bins() as f64 * params.n() as f64 * f64::from(params.capacity());
    if work > MAX_TABLE_WORK {
        return Err(Error::Budget {
            what: "sequential sampler table work N*n*C",
            required: work,
            limit: MAX_TABLE_WORK,
        });
    }
    let table = LogCountTable::build(params, Retain::All);
    let cap = params.capacity() as usize;
    let draw = |index: usize| {
        let mut histogram = vec![0u64; cap + 1];
        sequential_loads(&table, &mut config.rng(index), |k| histogram[k] += 1);
        histogram
    };
    let histograms = in_pool(config.workers, || {
        (0..config.samples).into_par_iter().map(draw).collect::<Vec<_>>()
    })?;
    Ok(SampleBatch::from_histograms(config, m, histograms))
}

/// Draws iid `W(lambda_0)` loads until they total `n`, once per sample.
pub fn sample_rejection(config: SamplerConfig, tilt: &TiltSolution, m: &[u32]) -> Result<SampleBatch> {
    config.check(SamplerMethod::Rejection)?;
    let params = config.params;
    validate_levels(m, params.capacity())?;
    if params.n() == 0 || !params.is_nontrivial() {
        return Err(Error::NoInteriorRoot {
            load: params.load(),
            capacity: params.capacity(),
        });
    }
    if tilt.params != Some(params) {
        return Err(Error::InvalidParams(
            "tilt solution was not solved for the sampler parameters".into(),
        ));
    }
    let predicted = 1.0 / (2.0 * PI * tilt.n_var()).sqrt();
    let projected = config.samples as f64 / predicted.min(1.0);
    if projected > MAX_REJECTION_ATTEMPTS {
        return Err(Error::Budget {
            what: "projected rejection attempts",
            required: projected,
            limit: MAX_REJECTION_ATTEMPTS,
        });
    }
    let cap = params.capacity() as usize;
    let mut cdf: Vec<f64> = tilt
        .law
        .pmf()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    cdf[cap] = f64::INFINITY;
    let per_sample_limit = MAX_REJECTION_ATTEMPTS as u64;

    let draw = |index: usize| -> Result<(Vec<u64>, u64)> {
        let mut rng = config.rng(index);
        let mut histogram = vec![0u64; cap + 1];
        for attempt in 1..=per_sample_limit {
            histogram.iter_mut().for_each(|h| *h = 0);
            let mut total = 0u64;
            for _ in 0..params.bins() {
                let u = rng.gen::<f64>();
                let k = cdf.iter().position(|&c| u < c).expect("last cell is +inf");
                histogram[k] += 1;
                total += k as u64;
                if total > params.n() {
                    break;
                }
            }
            if total == params.n() && histogram.iter().sum::<u64>() == params.bins() {
                return Ok((histogram, attempt));
            }
        }
        Err(Error::Budget {
            what: "rejection attempts for one sample",
            required: per_sample_limit as f64,
            limit: per_sample_limit as f64,
        })
    };
    let drawn = in_pool(config.workers, || {
        (0..config.samples)
            .into_par_iter()
            .map(draw)
            .collect::<Result<Vec<_>>>()
    })??;
    let attempts: u64 = drawn.iter().map(|(_, a)| a).sum();
    let histograms = drawn.into_iter().map(|(h, _)| h).collect();
    let mut batch = SampleBatch::from_histograms(config, m, histograms);
    let accepted = config.samples as u64;
    let p = predicted.min(1.0);
    batch.acceptance = Some(AcceptanceReport {
        attempts,
        accepted,
        rate: accepted as f64 / attempts as f64,
        predicted,
        sigma: (p * (1.0 - p) / attempts as f64).sqrt(),
    });
    Ok(batch)
}

/// Fills `standardized = Sigma^{-1/2} (raw - mu)`.
pub fn standardize(mut batch: SampleBatch, model: &CovModel, mu: &[f64]) -> Result<SampleBatch> {
    let r = batch.m.len();
    for found in [model.r(), mu.len()] {
        if found != r {
            return Err(Error::DimensionMismatch { expected: r, found });
        }
    }
    let z = batch
        .raw
        .iter()
        .map(|x| {
            let centred: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
            model.invsqrt.mul_vec(&centred)
        })
        .collect();
    batch.mu = Some(mu.to_vec());
    batch.standardized = Some(z);
    Ok(batch)
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalityReport {
    pub samples: usize,
    pub r: usize,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    /// `max_ij |cov_ij - delta_ij|`.
    pub max_cov_deviation: f64,
    /// Average of `|z|^2`; tends to `r`.
    pub mean_squared_norm: f64,
    pub ks: Vec<f64>,
    /// `2 * 1.36 / sqrt(samples)`.
    pub ks_gate: f64,
    pub ks_flagged: Vec<bool>,
}

pub fn normality_report(batch: &SampleBatch) -> Result<NormalityReport> {
    let z = batch.standardized.as_ref().ok_or_else(|| {
        Error::InvalidParams("batch has not been standardized".into())
    })?;
    if z.len() < MIN_REPORT_SAMPLES {
        return Err(Error::TooFewSamples {
            found: z.len(),
            required: MIN_REPORT_SAMPLES,
        });
    }
    let r = batch.m.len();
    let (mean, covariance) = empirical_covariance(z)?;
    let max_cov_deviation = covariance.sub(&Matrix::identity(r)).max_abs();
    let norms: Vec<Vec<f64>> = z.iter().map(|v| vec![v.iter().map(|x| x * x).sum()]).collect();
    let mean_squared_norm = empirical_mean(&norms)[0];
    let ks: Vec<f64> = (0..r)
        .map(|i| ks_distance_normal(&z.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    let ks_gate = 2.0 * ks_band(z.len());
    let ks_flagged = ks.iter().map(|&d| d > ks_gate).collect();
    Ok(NormalityReport {
        samples: z.len(),
        r,
        mean,
        covariance,
        max_cov_deviation,
        mean_squared_norm,
        ks,
        ks_gate,
        ks_flagged,
    })
}
