//! The Poisson law conditioned on `W <= C`.
//!
//! `P(W = j) = lambda^j / (j! g(lambda))` for `0 <= j <= C`, with
//! `g(lambda) = sum_{k<=C} lambda^k / k!`. The tilt `lambda_0` is the unique
//! root of `E W(lambda_0) = n/N`; iid copies of `W(lambda_0)` conditioned on
//! their total being `n` reproduce the uniform law of admissible placements,
//! which yields the local-limit approximation of `M_n(N, C)`.

use serde::Serialize;

use crate::occupancy::AllocationParams;
use crate::special::ln_factorial;
use crate::{Error, Result};

/// `W(lambda)` with cached pmf and moments.
#[derive(Debug, Clone, Serialize)]
pub struct TiltedPoisson {
    lambda: f64,
    capacity: u32,
    ln_g: f64,
    pmf: Vec<f64>,
    mean: f64,
    /// `C - E W`, summed separately from the mean so both keep full relative
    /// precision.
    deficit: f64,
    variance: f64,
}

impl TiltedPoisson {
    pub fn new(lambda: f64, capacity: u32) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParams(format!(
                "tilt parameter must be positive and finite, got {lambda}"
            )));
        }
        if capacity == 0 {
            return Err(Error::InvalidParams("capacity C must be positive".into()));
        }
        let ln_lambda = lambda.ln();
        let log_weights: Vec<f64> = (0..=capacity as u64)
            .map(|j| j as f64 * ln_lambda - ln_factorial(j))
            .collect();
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let ln_g = max + total.ln();
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let cap = f64::from(capacity);
        let deficit: f64 = pmf
            .iter()
            .enumerate()
            .map(|(j, p)| (cap - j as f64) * p)
            .sum();
        let mean: f64 = pmf.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
        let variance: f64 = pmf
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let centred = if mean < 0.5 * cap {
                    j as f64 - mean
                } else {
                    (j as f64 - cap) + deficit
                };
                centred * centred * p
            })
            .sum();
        Ok(Self {
            lambda,
            capacity,
            ln_g,
            pmf,
            mean,
            deficit,
            variance,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    /// `g(lambda)`; may overflow to infinity for huge `lambda`, prefer `ln_g`.
    pub fn g(&self) -> f64 {
        self.ln_g.exp()
    }

    pub fn ln_g(&self) -> f64 {
        self.ln_g
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// `G(lambda) = var W / lambda`.
    pub fn big_g(&self) -> f64 {
        self.variance / self.lambda
    }

    /// Mean and variance through the generating-function route
    /// `lambda g'/g` and `lambda^2 g''/g + lambda g'/g - (lambda g'/g)^2`.
    pub fn closed_form_moments(&self) -> (f64, f64) {
        // lambda^r g^(r) / g = E [W]_r
        let first: f64 = self.pmf.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
        let second: f64 = self
            .pmf
            .iter()
            .enumerate()
            .map(|(j, p)| (j as f64) * (j as f64 - 1.0) * p)
            .sum();
        (first, second + first - first * first)
    }
}

/// The root `lambda_0` of `E W(lambda_0) = n/N`, or more generally a law at a
/// prescribed `lambda` for `N` bins, with `load = E W`.
#[derive(Debug, Clone, Serialize)]
pub struct TiltSolution {
    /// Present when the solution came from integer `(n, N, C)`.
    pub params: Option<AllocationParams>,
    pub bins: u64,
    /// `n/N`, or `E W(lambda)` for a prescribed `lambda`.
    pub load: f64,
    pub law: TiltedPoisson,
}

impl TiltSolution {
    /// Asymptotic model at a prescribed tilt (non-integer `n = N E W`).
    pub fn at_lambda(bins: u64, capacity: u32, lambda: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParams("bin count N must be positive".into()));
        }
        let law = TiltedPoisson::new(lambda, capacity)?;
        Ok(Self {
            params: None,
            bins,
            load: law.mean(),
            law,
        })
    }

    pub fn lambda0(&self) -> f64 {
        self.law.lambda()
    }

    pub fn capacity(&self) -> u32 {
        self.law.capacity()
    }

    /// `N var W(lambda_0)`.
    pub fn n_var(&self) -> f64 {
        self.bins as f64 * self.law.variance()
    }
}

const MAX_SOLVER_ITERATIONS: usize = 400;

/// Solves `E W(lambda_0) = n/N` by safeguarded Newton on `ln lambda`.
///
/// `d E W / d ln lambda = var W > 0`, so the bracket always contains the
/// unique root. For loads above `C/2` the residual is evaluated through the
/// deficit `C - E W` so that loads close to `C` keep full relative precision.
pub fn solve_lambda0(params: AllocationParams) -> Result<TiltSolution> {
    let capacity = params.capacity();
    if params.n() == 0 || !params.is_nontrivial() {
        return Err(Error::NoInteriorRoot {
            load: params.load(),
            capacity,
        });
    }
    let target = params.load();
    let target_deficit = (params.total_capacity() - params.n()) as f64 / params.bins() as f64;
    let low_load = target < 0.5 * f64::from(capacity);
    // E W - n/N, from whichever side keeps relative precision
    let residual = |law: &TiltedPoisson| {
        if low_load {
            law.mean() - target
        } else {
            target_deficit - law.deficit()
        }
    };
    let tolerance = 1e-13 * target;

    // E W(lambda) <= lambda, so ln(target) is a lower bracket
    let mut lo = target.ln();
    let mut hi = lo + 1.0;
    let mut step = 1.0;
    while residual(&TiltedPoisson::new(hi.exp(), capacity)?) < 0.0 {
        lo = hi;
        step *= 2.0;
        hi += step;
        if hi > 700.0 {
            return Err(Error::NoInteriorRoot {
                load: target,
                capacity,
            });
        }
    }

    let mut x = 0.5 * (lo + hi);
    let mut law = TiltedPoisson::new(x.exp(), capacity)?;
    for _ in 0..MAX_SOLVER_ITERATIONS {
        let r = residual(&law);
        if r.abs() <= tolerance {
            break;
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - r / law.variance();
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if next == x || hi - lo <= f64::EPSILON * x.abs().max(1.0) {
            break;
        }
        x = next;
        law = TiltedPoisson::new(x.exp(), capacity)?;
    }
    Ok(TiltSolution {
        params: Some(params),
        bins: params.bins(),
        load: target,
        law,
    })
}

/// `(exact var W, C/lambda (1 + 2(C-2)/lambda))`; requires `lambda >= 1`.
pub fn variance_expansion_check(law: &TiltedPoisson) -> Result<(f64, f64)> {
    if law.lambda() < 1.0 {
        return Err(Error::InvalidParams(format!(
            "variance expansion needs lambda >= 1, got {}",
            law.lambda()
        )));
    }
    let c = f64::from(law.capacity());
    let l = law.lambda();
    Ok((law.variance(), c / l * (1.0 + 2.0 * (c - 2.0) / l)))
}

/// Local-limit approximation
/// `ln M_n(N,C) ~ ln n! + N ln g(lambda_0) - n ln lambda_0 - ln(2 pi N var W) / 2`.
pub fn llt_count_approx(params: AllocationParams, tilt: &TiltSolution) -> f64 {
    let n = params.n();
    let bins = params.bins() as f64;
    let law = &tilt.law;
    ln_factorial(n) + bins * law.ln_g()
        - n as f64 * law.lambda().ln()
        - 0.5 * (2.0 * std::f64::consts::PI * bins * law.variance()).ln()
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityNoteRow {
    pub params: AllocationParams,
    pub lambda0: f64,
    pub inv_lambda: f64,
    /// `1 - n/(CN)`.
    pub free_fraction: f64,
    /// `(1/lambda_0) / (1 - n/(CN))`, tends to 1 as `n/N -> C`.
    pub ratio: f64,
}

/// Tabulates `1/lambda_0` against `1 - n/(CN)` for loads in `(C-1, C)`.
pub fn lambda_capacity_note_check(sequence: &[AllocationParams]) -> Result<Vec<CapacityNoteRow>> {
    sequence
        .iter()
        .map(|&params| {
            let c = f64::from(params.capacity());
            let load = params.load();
            if !(load > c - 1.0 && load < c) {
                return Err(Error::InvalidParams(format!(
                    "capacity note needs C-1 < n/N < C, got n/N = {load}"
                )));
            }
            let tilt = solve_lambda0(params)?;
            let inv_lambda = 1.0 / tilt.lambda0();
            let free_fraction =
                (params.total_capacity() - params.n()) as f64 / params.total_capacity() as f64;
            Ok(CapacityNoteRow {
                params,
                lambda0: tilt.lambda0(),
                inv_lambda,
                free_fraction,
                ratio: inv_lambda / free_fraction,
            })
        })
        .collect()
}
