//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always show.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urnclt::cli::{ladder_rows, CovSource, ExperimentManifest, LadderSpec, LambdaRule};
use urnclt::covariance::{
    build_sigma, closed_form_sigma12, closed_form_sigma123, diagonal_regime_sigma, CovModel,
};
use urnclt::linalg::Matrix;
use urnclt::moments::{
    exact_covariance, lemma_order_scale, moment_comparison_grid, ExactMomentEngine, KGrid,
    LogMomentEngine, MomentOrder,
};
use urnclt::occupancy::{count_placements, enumerate_placements, Retain};
use urnclt::simulator::{
    normality_report, sample_rejection, sample_sequential_exact, standardize, SamplerConfig,
    SamplerMethod,
};
use urnclt::special::{ln_biguint, ln_factorial};
use urnclt::stats::two_sample_chi_square;
use urnclt::tilted::{llt_count_approx, solve_lambda0, TiltSolution, TiltedPoisson};
use urnclt::{AllocationParams, ExactCountTable, LogCountTable};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn params(n: u64, bins: u64, c: u32) -> AllocationParams {
    AllocationParams::new(n, bins, c).unwrap()
}

fn falling_int(x: u32, k: u32) -> BigInt {
    (0..k).fold(BigInt::from(1), |acc, i| {
        acc * BigInt::from(i64::from(x) - i64::from(i))
    })
}

/// All `k` in `{0, 1, 2}^r`.
fn small_orders(r: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..r {
        out = out
            .into_iter()
            .flat_map(|k| (0..=2).map(move |v| [k.clone(), vec![v]].concat()))
            .collect();
    }
    out
}

fn exact_moment_oracle() -> Outcome {
    let mut checked = 0usize;
    for bins in 1..=4u64 {
        for c in 1..=3u32 {
            for n in 1..u64::from(c) * bins {
                let p = params(n, bins, c);
                let enumeration = enumerate_placements(p).unwrap();
                let engine = ExactMomentEngine::new(p);
                let mut profiles: Vec<Vec<u32>> = (0..=c).map(|m| vec![m]).collect();
                for a in 0..=c {
                    for b in 0..=c {
                        if a != b {
                            profiles.push(vec![a, b]);
                        }
                    }
                }
                for m in &profiles {
                    for k in small_orders(m.len()) {
                        let formula = engine.moment(m, &MomentOrder::new(k.clone())).unwrap();
                        let brute = enumeration.expectation(|hist| {
                            m.iter()
                                .zip(&k)
                                .map(|(&mi, &ki)| falling_int(hist[mi as usize], ki))
                                .product()
                        });
                        if formula != brute {
                            return outcome(
                                false,
                                format!("mismatch at {p:?} m={m:?} k={k:?}: {formula} vs {brute}"),
                            );
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    outcome(true, format!("{checked} moments equal brute force exactly"))
}

fn counting_suite() -> Outcome {
    let mut checked = 0;
    for bins in 1..=4u64 {
        for c in 1..=3u32 {
            for n in 0..=8u64.min(u64::from(c) * bins) {
                let p = params(n, bins, c);
                let brute = enumerate_placements(p).unwrap().admissible;
                if count_placements(p) != brute.into() {
                    return outcome(false, format!("count mismatch at {p:?}"));
                }
                checked += 1;
            }
        }
    }
    let p = params(200, 100, 3);
    let exact = ExactCountTable::build(p, Retain::All);
    let logs = LogCountTable::build(p, Retain::All);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for j in 0..=100u64 {
        for s in 0..=200u64.min(3 * j) {
            let e = ln_biguint(&exact.count(j, s));
            worst = worst.max((logs.ln_count(j, s) - e).exp_m1().abs());
            entries += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{checked} counts exact; log table worst relative error {worst:.2e} over {entries} entries"),
    )
}

fn llt_accuracy() -> Outcome {
    let fixture = include_str!("fixtures/llt_relative_error.csv");
    let recorded: BTreeMap<u64, f64> = fixture
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('N'))
        .map(|l| {
            let (n, e) = l.split_once(',').unwrap();
            (n.parse().unwrap(), e.parse().unwrap())
        })
        .collect();
    let mut errors = Vec::new();
    let mut matches_fixture = true;
    for bins in [50u64, 100, 200, 400] {
        let n = (0.9 * 3.0 * bins as f64).floor() as u64;
        let p = params(n, bins, 3);
        let tilt = solve_lambda0(p).unwrap();
        let exact = ln_biguint(&count_placements(p));
        let err = (llt_count_approx(p, &tilt) - exact).exp_m1().abs();
        matches_fixture &= recorded
            .get(&bins)
            .is_some_and(|&r| (r - err).abs() <= 1e-9 * r);
        errors.push(err);
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let last = errors[3];
    outcome(
        decreasing && last < 0.05 && matches_fixture,
        format!(
            "errors {:?}; decreasing={decreasing}; N=400 error {last:.4}; fixture match={matches_fixture}",
            errors.iter().map(|e| format!("{e:.4e}")).collect::<Vec<_>>()
        ),
    )
}

fn lemma_trend() -> Outcome {
    let load = TiltedPoisson::new(4.0, 3).unwrap().mean();
    let profiles: [&[u32]; 2] = [&[2, 1], &[3, 2, 1]];
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); profiles.len()];
    let mut lambdas = Vec::new();
    for bins in [1000u64, 2000, 4000] {
        let n = (load * bins as f64).round() as u64;
        let p = params(n, bins, 3);
        let tilt = solve_lambda0(p).unwrap();
        lambdas.push(tilt.lambda0());
        let max_sum = (0.25 * lemma_order_scale(&tilt)).floor() as u32;
        let engine = LogMomentEngine::new(p, u64::from(max_sum)).unwrap();
        for (slot, m) in errors.iter_mut().zip(profiles) {
            let grid = KGrid::simplex(m.len(), max_sum).unwrap();
            slot.push(moment_comparison_grid(&engine, m, &tilt, &grid).unwrap().max_rel_error);
        }
    }
    let pass = errors.iter().all(|e| e.windows(2).all(|w| w[1] < w[0]));
    outcome(
        pass,
        format!(
            "lambda0 {:?}; max errors m=(2,1) {:?}, m=(3,2,1) {:?}",
            lambdas.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(),
            errors[0].iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
            errors[1].iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()
        ),
    )
}

/// Relative eigenvalue gaps per lambda, one vector per lambda.
fn eigen_gaps(c: u32, m: &[u32], closed: impl Fn(f64) -> Vec<f64>) -> Vec<Vec<f64>> {
    [25.0, 50.0, 100.0]
        .iter()
        .map(|&lambda| {
            let tilt = TiltSolution::at_lambda(1_000_000, c, lambda).unwrap();
            let numeric = build_sigma(m, &tilt).unwrap().eigenvalues;
            numeric
                .iter()
                .zip(closed(lambda))
                .map(|(a, b)| (a / b - 1.0).abs())
                .collect()
        })
        .collect()
}

fn closed_form_eigenstructure() -> Outcome {
    let lambdas = [25.0, 50.0, 100.0];
    let pair = eigen_gaps(3, &[2, 1], |l| {
        let cf = closed_form_sigma12(3, 1e6, l).unwrap();
        vec![cf.nu1, cf.nu2]
    });
    let triple = eigen_gaps(4, &[3, 2, 1], |l| closed_form_sigma123(4, 1e6, l).unwrap().nu.to_vec());
    let judge = |gaps: &[Vec<f64>]| {
        let within = gaps
            .iter()
            .zip(lambdas)
            .all(|(g, l)| g.iter().all(|&e| e <= 10.0 / l));
        let shrinks = (0..gaps[0].len()).all(|i| gaps.windows(2).all(|w| w[0][i] >= 1.5 * w[1][i]));
        within && shrinks
    };
    let fmt = |gaps: &[Vec<f64>]| {
        gaps.iter()
            .map(|g| g.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join("/"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        judge(&pair) && judge(&triple),
        format!(
            "C=3 gaps at lambda 25,50,100: {}; C=4: {}",
            fmt(&pair),
            fmt(&triple)
        ),
    )
}

fn root_identities() -> Outcome {
    let mut models: Vec<CovModel> = Vec::new();
    for c in 3..=6u32 {
        for &lambda in &[2.0, 5.0, 10.0, 50.0, 100.0] {
            for &bins in &[1_000u64, 1_000_000] {
                let tilt = TiltSolution::at_lambda(bins, c, lambda).unwrap();
                for m in [vec![c - 1, c - 2], vec![c - 1, c - 2, c - 3], vec![c], vec![c, c - 2]] {
                    if let Ok(model) = build_sigma(&m, &tilt) {
                        models.push(model);
                    }
                }
                if let Ok(d) = diagonal_regime_sigma(&[c - 2, c - 3], &tilt) {
                    models.push(d.model);
                }
                // the 1/lambda corrections can break definiteness at small lambda
                if let Ok(model) = closed_form_sigma12(c, bins as f64, lambda).and_then(|cf| CovModel::new(cf.sigma)) {
                    models.push(model);
                }
            }
        }
    }
    // with C = 3 any three levels are tied by the two mass constraints
    for (n, bins, c, m) in [
        (20u64, 10u64, 3u32, vec![2u32, 1]),
        (2990, 1000, 3, vec![2, 1]),
        (600, 300, 4, vec![3, 2, 1]),
        (900, 300, 4, vec![0, 1, 2]),
    ] {
        let engine = LogMomentEngine::new(params(n, bins, c), 2).unwrap();
        models.push(CovModel::new(exact_covariance(&engine, &m).unwrap().1).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for dim in 1..=12 {
        let mut a = Matrix::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                a[(i, j)] = rng.gen::<f64>() * 2.0 - 1.0;
            }
        }
        let spd = a.mul(&a.transpose()).sub(&Matrix::identity(dim).scale(-0.1));
        models.push(CovModel::new(spd).unwrap());
    }
    let sqrt = models.iter().map(CovModel::sqrt_residual).fold(0.0, f64::max);
    let white = models.iter().map(CovModel::whitening_residual).fold(0.0, f64::max);
    outcome(
        sqrt <= 1e-10 && white <= 1e-10,
        format!(
            "{} models; worst root residual {sqrt:.2e}, worst whitening residual {white:.2e}",
            models.len()
        ),
    )
}

/// `n` for `N` bins of capacity `C` whose tilt is closest to `lambda`.
fn tuned(bins: u64, c: u32, lambda: f64) -> AllocationParams {
    let load = TiltedPoisson::new(lambda, c).unwrap().mean();
    params((load * bins as f64).round() as u64, bins, c)
}

fn clt_monte_carlo() -> Outcome {
    let p = tuned(2000, 3, 5.0);
    let m = [2u32, 1];
    let engine = LogMomentEngine::new(p, 2).unwrap();
    let (mu, sigma) = exact_covariance(&engine, &m).unwrap();
    let model = CovModel::new(sigma.clone()).unwrap();
    let samples = 20_000;
    let config = SamplerConfig {
        params: p,
        method: SamplerMethod::SequentialExact,
        seed: 20_240_601,
        samples,
        workers: 0,
    };
    let batch = sample_sequential_exact(config, &m).unwrap();
    let batch = standardize(batch, &model, &mu).unwrap();
    let report = normality_report(&batch).unwrap();
    // raw means against the exact means, 4 standard errors
    let raw_mean = urnclt::stats::empirical_mean(&batch.raw);
    let means_ok = (0..2).all(|i| (raw_mean[i] - mu[i]).abs() <= 4.0 * (sigma[(i, i)] / samples as f64).sqrt());
    let ks_ok = report.ks.iter().all(|&d| d <= 0.02);
    let pass = report.max_cov_deviation <= 0.05
        && ks_ok
        && (report.mean_squared_norm - 2.0).abs() <= 0.1
        && means_ok;
    outcome(
        pass,
        format!(
            "n={} lambda0={:.4}; cov deviation {:.4}; KS {:?}; mean |z|^2 {:.4}; means within 4 se: {means_ok}",
            p.n(),
            solve_lambda0(p).unwrap().lambda0(),
            report.max_cov_deviation,
            report.ks.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>(),
            report.mean_squared_norm
        ),
    )
}

fn sampler_cross_validation() -> Outcome {
    let p = params(20, 10, 3);
    let base = SamplerConfig {
        params: p,
        method: SamplerMethod::SequentialExact,
        seed: 11,
        samples: 100_000,
        workers: 0,
    };
    let seq = sample_sequential_exact(base, &[2, 1]).unwrap();
    let tilt = solve_lambda0(p).unwrap();
    let rej = sample_rejection(
        SamplerConfig {
            method: SamplerMethod::Rejection,
            seed: 12,
            ..base
        },
        &tilt,
        &[2, 1],
    )
    .unwrap();
    let chi = two_sample_chi_square(&seq.occupancy_law(), &rej.occupancy_law(), 5).unwrap();

    // exact acceptance P(sum W = n) = lambda^n M_n / (n! g^N) on the desk instance
    let acc = rej.acceptance.unwrap();
    let ln_exact_rate = p.n() as f64 * tilt.lambda0().ln() + ln_biguint(&count_placements(p))
        - ln_factorial(p.n())
        - p.bins() as f64 * tilt.law.ln_g();
    let exact_rate = ln_exact_rate.exp();
    let desk_sigma = (exact_rate * (1.0 - exact_rate) / acc.attempts as f64).sqrt();
    let desk_z = (acc.rate - exact_rate) / desk_sigma;

    // local-limit acceptance at N = 2000, C = 3, lambda0 ~ 5
    let big = tuned(2000, 3, 5.0);
    let big_tilt = solve_lambda0(big).unwrap();
    let big_batch = sample_rejection(
        SamplerConfig {
            params: big,
            method: SamplerMethod::Rejection,
            seed: 13,
            samples: 2000,
            workers: 0,
        },
        &big_tilt,
        &[2, 1],
    )
    .unwrap();
    let big_acc = big_batch.acceptance.unwrap();
    let pass = chi.p_value > 1e-3 && desk_z.abs() <= 3.0 && big_acc.z_score().abs() <= 3.0;
    outcome(
        pass,
        format!(
            "chi2={:.2} dof={} p={:.4}; desk acceptance {:.5} vs exact {:.5} (z={desk_z:.2}); N=2000 acceptance {:.5} vs LLT {:.5} (z={:.2})",
            chi.statistic,
            chi.dof,
            chi.p_value,
            acc.rate,
            exact_rate,
            big_acc.rate,
            big_acc.predicted,
            big_acc.z_score()
        ),
    )
}

fn ladder_monotonicity() -> Outcome {
    let run = |capacity: u32, m: Vec<u32>, source: CovSource| {
        let mut manifest = ExperimentManifest::default();
        manifest.model.capacity = capacity;
        manifest.profile = m;
        manifest.covariance.source = Some(source);
        manifest.ladder = Some(LadderSpec {
            bins: vec![1_000, 10_000, 100_000, 1_000_000],
            lambda_rule: LambdaRule::Power(0.125),
            moment_error: false,
        });
        ladder_rows(&manifest).unwrap()
    };
    let decreasing = |rows: &[urnclt::cli::LadderRow]| {
        rows.windows(2)
            .all(|w| w[1].qmu < w[0].qmu && w[1].max < w[0].max && w[1].extra < w[0].extra)
    };
    let pair = run(3, vec![2, 1], CovSource::Asymptotic);
    let diag = run(4, vec![2, 1], CovSource::Diagonal);
    let fmt = |rows: &[urnclt::cli::LadderRow]| {
        rows.iter()
            .map(|r| format!("{:.2e}/{:.2e}/{:.2e}", r.qmu, r.max, r.extra))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        decreasing(&pair) && decreasing(&diag),
        format!("pair (C=3) qmu/max/extra: {}; diagonal (C=4): {}", fmt(&pair), fmt(&diag)),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
        }
    }
    out
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_urnclt");
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("ladder.toml");
    fs::write(
        &manifest,
        "profile = [2, 1]\n[model]\ncapacity = 3\n[ladder]\nbins = [1000, 10000, 100000]\nlambda_rule = \"power:0.125\"\n",
    )
    .unwrap();
    let manifest = manifest.to_string_lossy().into_owned();
    let commands: Vec<Vec<&str>> = vec![
        vec!["count", "--n", "30", "--N", "12", "--C", "3"],
        vec!["lambda", "--n", "2990", "--N", "1000", "--C", "3"],
        vec!["moments", "--n", "700", "--N", "300", "--C", "3", "--m", "2,1"],
        vec!["sigma", "--N", "1000000", "--C", "4", "--lambda", "50", "--m", "3,2,1"],
        vec!["simulate", "--n", "20", "--N", "10", "--C", "3", "--m", "2,1", "--samples", "3000", "--seed", "5"],
        vec!["ladder", "--config", &manifest],
    ];
    let mut compared = 0;
    for (i, args) in commands.iter().enumerate() {
        let mut runs = Vec::new();
        for (j, workers) in ["1", "4"].iter().enumerate() {
            let out = tmp.path().join(format!("run{i}-{j}"));
            let mut cmd = Command::new(exe);
            cmd.args(args).arg("--out").arg(&out);
            // one run through the flag, one through the environment
            if j == 0 {
                cmd.arg("--workers").arg(workers);
            } else {
                cmd.env("URNCLT_WORKERS", workers);
            }
            let result = cmd.output().unwrap();
            if !result.status.success() {
                return outcome(
                    false,
                    format!("{args:?} failed: {}", String::from_utf8_lossy(&result.stderr)),
                );
            }
            runs.push((result.stdout, read_tree(&out)));
        }
        if runs[0] != runs[1] {
            return outcome(false, format!("{args:?} differs between reruns"));
        }
        compared += 1 + runs[0].1.len();
    }
    outcome(true, format!("{compared} outputs byte-identical across workers 1 and 4"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("exact-moment oracle", exact_moment_oracle),
        ("counting suite", counting_suite),
        ("local-limit accuracy", llt_accuracy),
        ("moment asymptotics trend", lemma_trend),
        ("closed-form eigenstructure", closed_form_eigenstructure),
        ("matrix-root identities", root_identities),
        ("CLT Monte Carlo", clt_monte_carlo),
        ("sampler cross-validation", sampler_cross_validation),
        ("condition-ladder monotonicity", ladder_monotonicity),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (index, (name, check)) in criteria.iter().enumerate() {
        let number = index + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &number.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!(
            "criterion {number:>2} {verdict} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
