//! The `urnclt` command-line front end.
//!
//! Every command resolves a manifest (TOML file, then flags, then defaults),
//! echoes it into its outputs and writes CSV/JSON under the output
//! directory. The worker count and the output directory are not echoed, so
//! reruns with any `--workers` or `--out` produce identical bytes.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::covariance::{
    build_sigma, check_conditions, closed_form_sigma12, closed_form_sigma123,
    diagonal_regime_sigma, fixed_gamma_factorization, sigma_matrix, CovModel,
    GAMMA_SINGULAR_THRESHOLD,
};
use crate::linalg::Matrix;
use crate::moments::{
    exact_covariance, lemma_order_scale, MAX_TABLE_ENTRIES, moment_comparison_grid, overall_boundedness_check,
    validate_levels, KGrid, LogMomentEngine, MomentGrid, OccupancyProfile,
};
use crate::occupancy::{count_placements, AllocationParams, LogCountTable, Retain};
use crate::simulator::{
    normality_report, sample_rejection, sample_sequential_exact, standardize, SampleBatch,
    SamplerConfig, SamplerMethod, MIN_REPORT_SAMPLES,
};
use crate::tilted::{llt_count_approx, solve_lambda0, TiltSolution, TiltedPoisson};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exact big-integer counts are printed only up to this many table entries.
const EXACT_COUNT_LIMIT: f64 = 2e6;
const LOG_COUNT_LIMIT: f64 = 1e9;

#[derive(Debug, Parser)]
#[command(name = "urnclt", version, about = "Occupancy counts of capacity-constrained allocations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact and local-limit counts of admissible placements.
    Count(Overrides),
    /// The tilt lambda_0 solving E W = n/N.
    Lambda(Overrides),
    /// Exact versus asymptotic factorial moments over a k-grid.
    Moments(Overrides),
    /// Covariance model, roots, eigenstructure and diagnostics.
    Sigma(Overrides),
    /// Seeded samples, standardization and normality statistics.
    Simulate(Overrides),
    /// Diagnostics along a ladder of bin counts.
    Ladder(Overrides),
}

impl Command {
    fn overrides(&self) -> &Overrides {
        match self {
            Command::Count(o)
            | Command::Lambda(o)
            | Command::Moments(o)
            | Command::Sigma(o)
            | Command::Simulate(o)
            | Command::Ladder(o) => o,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Number of balls.
    #[arg(long = "n")]
    pub n: Option<u64>,
    /// Number of bins.
    #[arg(long = "N")]
    pub bins: Option<u64>,
    /// Bin capacity.
    #[arg(long = "C")]
    pub capacity: Option<u32>,
    /// Fill levels, comma separated.
    #[arg(long = "m", value_delimiter = ',')]
    pub m: Option<Vec<u32>>,
    /// Prescribed tilt instead of solving for n.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Worker threads (0 = available parallelism).
    #[arg(long, env = "URNCLT_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n: Option<u64>,
    pub bins: u64,
    pub capacity: u32,
    /// Prescribed tilt; `n` is then ignored for asymptotic quantities.
    pub lambda: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n: Some(20),
            bins: 10,
            capacity: 3,
            lambda: None,
        }
    }
}

impl ModelSpec {
    fn params(&self) -> Result<AllocationParams> {
        let n = self
            .n
            .ok_or_else(|| Error::InvalidParams("this command needs the ball count n".into()))?;
        AllocationParams::new(n, self.bins, self.capacity)
    }

    fn tilt(&self) -> Result<TiltSolution> {
        match self.lambda {
            Some(lambda) => TiltSolution::at_lambda(self.bins, self.capacity, lambda),
            None => solve_lambda0(self.params()?),
        }
    }
}

/// `fixed:x` or `power:alpha` (`lambda = N^alpha`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LambdaRule {
    Fixed(f64),
    Power(f64),
}

impl LambdaRule {
    pub fn lambda(&self, bins: u64) -> f64 {
        match *self {
            LambdaRule::Fixed(x) => x,
            LambdaRule::Power(alpha) => (bins as f64).powf(alpha),
        }
    }
}

impl fmt::Display for LambdaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaRule::Fixed(x) => write!(f, "fixed:{x}"),
            LambdaRule::Power(a) => write!(f, "power:{a}"),
        }
    }
}

impl TryFrom<String> for LambdaRule {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("lambda rule {s:?} is not kind:value"))?;
        let x: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("lambda rule {s:?} has a bad number"))?;
        if !x.is_finite() || x <= 0.0 {
            return Err(format!("lambda rule {s:?} needs a positive value"));
        }
        match kind.trim() {
            "fixed" => Ok(LambdaRule::Fixed(x)),
            "power" => Ok(LambdaRule::Power(x)),
            other => Err(format!("unknown lambda rule {other:?}")),
        }
    }
}

impl From<LambdaRule> for String {
    fn from(rule: LambdaRule) -> String {
        rule.to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSpec {
    pub bins: Vec<u64>,
    pub lambda_rule: LambdaRule,
    /// Also compare exact and asymptotic moments at `n = round(N E W)`.
    pub moment_error: bool,
}

impl Default for LadderSpec {
    fn default() -> Self {
        Self {
            bins: vec![1_000, 10_000, 100_000, 1_000_000],
            lambda_rule: LambdaRule::Power(0.125),
            moment_error: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// `sum k_i <= max_sum`.
    Simplex,
    /// `k_i <= upper_i`.
    Box,
    /// `sum k_i <= fraction (N / lambda_0)^{2/3}`.
    Lemma,
    /// Integer points of the hypothesis box `diag(mu) Sigma^{-1/2} [c1, c2]^r`.
    Domain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKind,
    pub max_sum: u32,
    pub upper: Vec<u32>,
    pub fraction: f64,
    /// Threshold flagged by the boundedness sweep.
    pub bound: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            kind: GridKind::Simplex,
            max_sum: 4,
            upper: Vec::new(),
            fraction: 0.25,
            bound: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SamplerMethod,
    pub seed: u64,
    pub samples: usize,
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            method: SamplerMethod::SequentialExact,
            seed: 1,
            samples: 1000,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovSource {
    Exact,
    Asymptotic,
    ClosedForm12,
    ClosedForm123,
    Diagonal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceSpec {
    /// Unset means exact when the count table fits, else asymptotic.
    pub source: Option<CovSource>,
    pub c1: f64,
    pub c2: f64,
}

impl CovarianceSpec {
    fn source(&self) -> CovSource {
        self.source.unwrap_or(CovSource::Asymptotic)
    }
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        Self {
            source: None,
            c1: -2.0,
            c2: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(skip_serializing)]
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("urnclt-out"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub model: ModelSpec,
    pub ladder: Option<LadderSpec>,
    /// Fill levels `m`; empty means `(C-1, C-2)` clipped at zero.
    pub profile: Vec<u32>,
    pub grid: GridSpec,
    pub sampler: SamplerSpec,
    pub covariance: CovarianceSpec,
    pub outputs: OutputSpec,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Flags win over the manifest.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let mut manifest = match &overrides.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        let o = overrides;
        if o.n.is_some() {
            manifest.model.n = o.n;
        }
        if let Some(bins) = o.bins {
            manifest.model.bins = bins;
        }
        if let Some(c) = o.capacity {
            manifest.model.capacity = c;
        }
        if o.lambda.is_some() {
            manifest.model.lambda = o.lambda;
        }
        if let Some(m) = &o.m {
            manifest.profile = m.clone();
        }
        if let Some(seed) = o.seed {
            manifest.sampler.seed = seed;
        }
        if let Some(samples) = o.samples {
            manifest.sampler.samples = samples;
        }
        if let Some(workers) = o.workers {
            manifest.sampler.workers = workers;
        }
        if let Some(dir) = &o.out {
            manifest.outputs.dir = dir.clone();
        }
        if manifest.covariance.source.is_none() {
            let model = &manifest.model;
            let entries = model.bins as f64 * (model.n.unwrap_or(0) as f64 + 1.0);
            let exact = model.lambda.is_none() && model.n.is_some() && entries <= MAX_TABLE_ENTRIES;
            manifest.covariance.source = Some(if exact {
                CovSource::Exact
            } else {
                CovSource::Asymptotic
            });
        }
        if manifest.profile.is_empty() {
            let c = manifest.model.capacity;
            manifest.profile = if c >= 2 { vec![c - 1, c - 2] } else { vec![c] };
        }
        Ok(manifest)
    }

    fn echo(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

/// Process exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Budget { .. } => 3,
        Error::Io(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command, writing the terminal summary to `out`.
pub fn execute(command: &Command, out: &mut (dyn Write + Send)) -> Result<()> {
    let manifest = ExperimentManifest::resolve(command.overrides())?;
    let job = || match command {
        Command::Count(_) => cmd_count(&manifest, out),
        Command::Lambda(_) => cmd_lambda(&manifest, out),
        Command::Moments(_) => cmd_moments(&manifest, out),
        Command::Sigma(_) => cmd_sigma(&manifest, out),
        Command::Simulate(_) => cmd_simulate(&manifest, out),
        Command::Ladder(_) => cmd_ladder(&manifest, out),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.sampler.workers)
        .build()
        .map_err(|e| Error::InvalidParams(format!("cannot start worker pool: {e}")))?;
    pool.install(job)
}

fn preamble(command: &str, manifest: &ExperimentManifest) -> Vec<String> {
    vec![
        format!("urnclt {VERSION} {command}"),
        format!("config {}", manifest.echo()),
    ]
}

fn output_path(manifest: &ExperimentManifest, file: &str) -> Result<PathBuf> {
    fs::create_dir_all(&manifest.outputs.dir)?;
    Ok(manifest.outputs.dir.join(file))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn header(command: &str, manifest: &ExperimentManifest) -> serde_json::Value {
    json!({
        "tool": "urnclt",
        "version": VERSION,
        "command": command,
        "config": manifest,
    })
}

fn merge(mut base: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(b), serde_json::Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn cmd_count(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let params = manifest.model.params()?;
    let entries = params.bins() as f64 * (params.n() as f64 + 1.0);
    let work = entries * f64::from(params.capacity());
    if work > LOG_COUNT_LIMIT {
        return Err(Error::Budget {
            what: "count table work N*(n+1)*C",
            required: work,
            limit: LOG_COUNT_LIMIT,
        });
    }
    writeln!(
        out,
        "# urnclt {VERSION} count n={} N={} C={}",
        params.n(),
        params.bins(),
        params.capacity()
    )?;
    if entries <= EXACT_COUNT_LIMIT {
        writeln!(out, "exact={}", count_placements(params))?;
    } else {
        writeln!(out, "exact=NA")?;
    }
    let ln_exact = LogCountTable::build(params, Retain::Last(1)).ln_count(params.bins(), params.n());
    writeln!(out, "ln_exact={ln_exact}")?;
    match solve_lambda0(params) {
        Ok(tilt) => {
            let ln_llt = llt_count_approx(params, &tilt);
            writeln!(out, "ln_llt={ln_llt}")?;
            writeln!(out, "llt_rel_error={}", (ln_llt - ln_exact).exp_m1().abs())?;
        }
        Err(Error::NoInteriorRoot { .. }) => writeln!(out, "ln_llt=NA")?,
        Err(e) => return Err(e),
    }
    Ok(())
}

fn cmd_lambda(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let params = manifest.model.params()?;
    let tilt = solve_lambda0(params)?;
    let law = &tilt.law;
    writeln!(
        out,
        "# urnclt {VERSION} lambda n={} N={} C={}",
        params.n(),
        params.bins(),
        params.capacity()
    )?;
    writeln!(out, "lambda0={}", tilt.lambda0())?;
    writeln!(out, "load={}", tilt.load)?;
    writeln!(out, "mean={}", law.mean())?;
    writeln!(out, "var={}", law.variance())?;
    writeln!(out, "G={}", law.big_g())?;
    writeln!(out, "ln_g={}", law.ln_g())?;
    writeln!(out, "ln_llt={}", llt_count_approx(params, &tilt))?;
    Ok(())
}

fn resolve_grid(manifest: &ExperimentManifest, tilt: &TiltSolution) -> Result<KGrid> {
    let spec = &manifest.grid;
    let m = &manifest.profile;
    match spec.kind {
        GridKind::Simplex => KGrid::simplex(m.len(), spec.max_sum),
        GridKind::Box => {
            if spec.upper.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    found: spec.upper.len(),
                });
            }
            KGrid::boxed(&spec.upper)
        }
        GridKind::Lemma => {
            let max_sum = (spec.fraction * lemma_order_scale(tilt)).floor();
            KGrid::simplex(m.len(), max_sum as u32)
        }
        GridKind::Domain => {
            let (model, mu) = asymptotic_model(m, tilt)?;
            let report = check_conditions(&model, &mu, manifest.covariance.c1, manifest.covariance.c2)?;
            KGrid::from_domain(&report.k_domain_lo, &report.k_domain_hi)
        }
    }
}

fn asymptotic_model(m: &[u32], tilt: &TiltSolution) -> Result<(CovModel, Vec<f64>)> {
    let (mu, sigma) = sigma_matrix(m, tilt)?;
    Ok((CovModel::new(sigma)?, mu))
}

fn cmd_moments(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let params = manifest.model.params()?;
    let m = &manifest.profile;
    validate_levels(m, params.capacity())?;
    let tilt = solve_lambda0(params)?;
    let grid = resolve_grid(manifest, &tilt)?;
    let engine = LogMomentEngine::new(params, grid.max_total().max(1))?;
    let comparison: MomentGrid = moment_comparison_grid(&engine, m, &tilt, &grid)?;
    let profile = OccupancyProfile::exact(m, &engine)?;
    let bounds = overall_boundedness_check(&engine, &profile, &grid, manifest.grid.bound)?;

    let csv = output_path(manifest, "moments.csv")?;
    let mut w = BufWriter::new(File::create(&csv)?);
    for line in preamble("moments", manifest) {
        writeln!(w, "# {line}")?;
    }
    comparison.write_csv(&mut w)?;
    w.flush()?;

    let json_path = output_path(manifest, "boundedness.json")?;
    write_json(
        &json_path,
        &merge(
            header("moments", manifest),
            json!({
                "lambda0": tilt.lambda0(),
                "lemma_order_scale": lemma_order_scale(&tilt),
                "grid_points": grid.len(),
                "max_rel_error": comparison.max_rel_error,
                "outside_lemma_scale": comparison.outside_lemma_scale,
                "profile": profile,
                "subsets": bounds,
            }),
        ),
    )?;
    writeln!(out, "max_rel_error={}", comparison.max_rel_error)?;
    writeln!(out, "points={}", grid.len())?;
    writeln!(out, "wrote {}", file_name(&csv))?;
    writeln!(out, "wrote {}", file_name(&json_path))?;
    Ok(())
}

/// Covariance and means for `m` from the configured source.
fn covariance_for(
    source: CovSource,
    manifest: &ExperimentManifest,
    tilt: &TiltSolution,
) -> Result<(CovModel, Vec<f64>)> {
    let m = &manifest.profile;
    let capacity = tilt.capacity();
    let is_pair = m.len() == 2 && capacity >= 2 && m[0] == capacity - 1 && m[1] == capacity - 2;
    let is_triple = m.len() == 3
        && capacity >= 3
        && m[0] == capacity - 1
        && m[1] == capacity - 2
        && m[2] == capacity - 3;
    match source {
        CovSource::Exact => {
            let params = manifest.model.params()?;
            let engine = LogMomentEngine::new(params, 2)?;
            let (mu, sigma) = exact_covariance(&engine, m)?;
            Ok((CovModel::new(sigma)?, mu))
        }
        CovSource::Asymptotic => asymptotic_model(m, tilt),
        CovSource::ClosedForm12 => {
            if !is_pair {
                return Err(Error::InvalidParams(
                    "closed-form-12 needs the profile (C-1, C-2)".into(),
                ));
            }
            let cf = closed_form_sigma12(capacity, tilt.bins as f64, tilt.lambda0())?;
            let mu = OccupancyProfile::asymptotic(m, tilt)?.mu;
            Ok((CovModel::new(cf.sigma)?, mu))
        }
        CovSource::ClosedForm123 => {
            if !is_triple {
                return Err(Error::InvalidParams(
                    "closed-form-123 needs the profile (C-1, C-2, C-3)".into(),
                ));
            }
            // closed-form eigenvalues on the numeric eigenvectors
            let cf = closed_form_sigma123(capacity, tilt.bins as f64, tilt.lambda0())?;
            let (numeric, mu) = asymptotic_model(m, tilt)?;
            let mut sigma = Matrix::zeros(3);
            for (k, nu) in cf.nu.iter().enumerate() {
                for i in 0..3 {
                    for j in 0..3 {
                        sigma[(i, j)] +=
                            nu * numeric.eigenvectors[(i, k)] * numeric.eigenvectors[(j, k)];
                    }
                }
            }
            Ok((CovModel::new(sigma)?, mu))
        }
        CovSource::Diagonal => {
            let d = diagonal_regime_sigma(m, tilt)?;
            Ok((d.model, d.mu))
        }
    }
}

fn relative_gaps(numeric: &[f64], closed: &[f64]) -> Vec<f64> {
    numeric.iter().zip(closed).map(|(a, b)| (a / b - 1.0).abs()).collect()
}

fn cmd_sigma(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let tilt = manifest.model.tilt()?;
    let m = &manifest.profile;
    validate_levels(m, tilt.capacity())?;
    let source = manifest.covariance.source();
    let (model, mu) = covariance_for(source, manifest, &tilt)?;
    let cov = &manifest.covariance;
    let conditions = check_conditions(&model, &mu, cov.c1, cov.c2)?;
    let gamma = fixed_gamma_factorization(&model, GAMMA_SINGULAR_THRESHOLD);

    let capacity = tilt.capacity();
    let (bins, lambda) = (tilt.bins as f64, tilt.lambda0());
    let closed12 = match closed_form_sigma12(capacity, bins, lambda) {
        Ok(cf) => {
            let numeric = build_sigma(&[capacity - 1, capacity - 2], &tilt)?;
            json!({
                "closed": cf,
                "numeric_eigenvalues": numeric.eigenvalues,
                "eigenvalue_rel_gap": relative_gaps(&numeric.eigenvalues, &[cf.nu1, cf.nu2]),
            })
        }
        Err(_) => serde_json::Value::Null,
    };
    let closed123 = match closed_form_sigma123(capacity, bins, lambda) {
        Ok(cf) => {
            let numeric = build_sigma(&[capacity - 1, capacity - 2, capacity - 3], &tilt)?;
            json!({
                "closed": cf,
                "numeric_eigenvalues": numeric.eigenvalues,
                "eigenvalue_rel_gap": relative_gaps(&numeric.eigenvalues, &cf.nu),
            })
        }
        Err(_) => serde_json::Value::Null,
    };

    let path = output_path(manifest, "sigma.json")?;
    write_json(
        &path,
        &merge(
            header("sigma", manifest),
            json!({
                "lambda0": lambda,
                "load": tilt.load,
                "mu": mu,
                "model": model,
                "residuals": {
                    "sqrt": model.sqrt_residual(),
                    "whitening": model.whitening_residual(),
                    "orthonormality": model.orthonormality_residual(),
                },
                "conditions": conditions,
                "gamma": gamma,
                "closed_form_12": closed12,
                "closed_form_123": closed123,
            }),
        ),
    )?;
    writeln!(out, "lambda0={lambda}")?;
    let values: Vec<String> = model.eigenvalues.iter().map(|v| v.to_string()).collect();
    writeln!(out, "eigenvalues={}", values.join(","))?;
    writeln!(out, "wrote {}", file_name(&path))?;
    Ok(())
}

fn cmd_simulate(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let params = manifest.model.params()?;
    let m = &manifest.profile;
    validate_levels(m, params.capacity())?;
    let spec = &manifest.sampler;
    let config = SamplerConfig {
        params,
        method: spec.method,
        seed: spec.seed,
        samples: spec.samples,
        workers: spec.workers,
    };
    let tilt = solve_lambda0(params)?;
    let batch: SampleBatch = match spec.method {
        SamplerMethod::SequentialExact => sample_sequential_exact(config, m)?,
        SamplerMethod::Rejection => sample_rejection(config, &tilt, m)?,
    };
    let (model, mu) = covariance_for(manifest.covariance.source(), manifest, &tilt)?;
    let batch = standardize(batch, &model, &mu)?;
    let report = if batch.len() >= MIN_REPORT_SAMPLES {
        Some(normality_report(&batch)?)
    } else {
        None
    };

    let csv = output_path(manifest, "samples.csv")?;
    let mut w = BufWriter::new(File::create(&csv)?);
    batch.write_csv(&mut w, &preamble("simulate", manifest))?;
    w.flush()?;

    let json_path = output_path(manifest, "normality.json")?;
    write_json(
        &json_path,
        &merge(
            header("simulate", manifest),
            json!({
                "lambda0": tilt.lambda0(),
                "mu": mu,
                "sigma": model.sigma,
                "acceptance": batch.acceptance,
                "report": report,
                "min_report_samples": MIN_REPORT_SAMPLES,
            }),
        ),
    )?;
    writeln!(out, "samples={}", batch.len())?;
    if let Some(r) = &report {
        writeln!(out, "max_cov_deviation={}", r.max_cov_deviation)?;
        writeln!(out, "mean_squared_norm={}", r.mean_squared_norm)?;
    }
    writeln!(out, "wrote {}", file_name(&csv))?;
    writeln!(out, "wrote {}", file_name(&json_path))?;
    Ok(())
}

/// One ladder point.
#[derive(Debug, Clone, Serialize)]
pub struct LadderRow {
    pub bins: u64,
    pub lambda: f64,
    pub qmu: f64,
    pub max: f64,
    pub extra: f64,
    /// Max relative moment error on the lemma grid, when requested.
    pub moment_max_error: Option<f64>,
    /// Max-entry gap between the closed-form and numeric `Sigma`, when the
    /// profile is `(C-1, C-2)` and `lambda >= 10`.
    pub cov_deviation: Option<f64>,
}

/// `Some(true)` when every value is strictly below its predecessor; `None`
/// when a column is missing anywhere.
pub fn strictly_decreasing(values: &[Option<f64>]) -> Option<bool> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.map(|v| v.windows(2).all(|w| w[1] < w[0]))
}

pub fn ladder_rows(manifest: &ExperimentManifest) -> Result<Vec<LadderRow>> {
    let ladder = manifest
        .ladder
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("ladder command needs a [ladder] section".into()))?;
    if ladder.bins.len() < 3 {
        return Err(Error::InvalidParams(format!(
            "a ladder needs at least 3 points, got {}",
            ladder.bins.len()
        )));
    }
    let capacity = manifest.model.capacity;
    let m = &manifest.profile;
    validate_levels(m, capacity)?;
    let source = match manifest.covariance.source() {
        // exact moments are unavailable at ladder scale
        CovSource::Exact => CovSource::Asymptotic,
        s => s,
    };
    ladder
        .bins
        .iter()
        .map(|&bins| {
            let lambda = ladder.lambda_rule.lambda(bins);
            let tilt = TiltSolution::at_lambda(bins, capacity, lambda)?;
            let mut point = manifest.clone();
            point.model = ModelSpec {
                n: None,
                bins,
                capacity,
                lambda: Some(lambda),
            };
            let (model, mu) = covariance_for(source, &point, &tilt)?;
            let report = check_conditions(&model, &mu, manifest.covariance.c1, manifest.covariance.c2)?;
            let is_pair = m.len() == 2 && capacity >= 2 && m[0] == capacity - 1 && m[1] == capacity - 2;
            let cov_deviation = if is_pair {
                closed_form_sigma12(capacity, bins as f64, lambda).ok().map(|cf| {
                    let numeric = sigma_matrix(m, &tilt).map(|(_, s)| s);
                    numeric.map_or(f64::NAN, |s| cf.sigma.sub(&s).max_abs() / s.max_abs())
                })
            } else {
                None
            };
            let moment_max_error = if ladder.moment_error {
                Some(ladder_moment_error(bins, capacity, lambda, m, manifest.grid.fraction)?)
            } else {
                None
            };
            Ok(LadderRow {
                bins,
                lambda,
                qmu: report.worst_qmu(),
                max: report.worst_max(),
                extra: report.worst_extra(),
                moment_max_error,
                cov_deviation,
            })
        })
        .collect()
}

fn ladder_moment_error(bins: u64, capacity: u32, lambda: f64, m: &[u32], fraction: f64) -> Result<f64> {
    let law = TiltedPoisson::new(lambda, capacity)?;
    let n = (law.mean() * bins as f64).round() as u64;
    let params = AllocationParams::new(n, bins, capacity)?;
    let tilt = solve_lambda0(params)?;
    let max_sum = (fraction * lemma_order_scale(&tilt)).floor() as u32;
    let grid = KGrid::simplex(m.len(), max_sum)?;
    let engine = LogMomentEngine::new(params, u64::from(max_sum).max(1))?;
    Ok(moment_comparison_grid(&engine, m, &tilt, &grid)?.max_rel_error)
}

fn fmt_cell(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn fmt_trend(t: Option<bool>) -> &'static str {
    match t {
        Some(true) => "yes",
        Some(false) => "no",
        None => "NA",
    }
}

fn cmd_ladder(manifest: &ExperimentManifest, out: &mut (dyn Write + Send)) -> Result<()> {
    let rows = ladder_rows(manifest)?;
    let columns: [(&str, Vec<Option<f64>>); 5] = [
        ("qmu", rows.iter().map(|r| Some(r.qmu)).collect()),
        ("max", rows.iter().map(|r| Some(r.max)).collect()),
        ("extra", rows.iter().map(|r| Some(r.extra)).collect()),
        ("moment_max_error", rows.iter().map(|r| r.moment_max_error).collect()),
        ("cov_deviation", rows.iter().map(|r| r.cov_deviation).collect()),
    ];
    let trend: Vec<String> = columns
        .iter()
        .map(|(name, col)| format!("{name}={}", fmt_trend(strictly_decreasing(col))))
        .collect();

    let path = output_path(manifest, "ladder.csv")?;
    let mut w = BufWriter::new(File::create(&path)?);
    for line in preamble("ladder", manifest) {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "N,lambda,qmu,max,extra,moment_max_error,cov_deviation")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.bins,
            r.lambda,
            r.qmu,
            r.max,
            r.extra,
            fmt_cell(r.moment_max_error),
            fmt_cell(r.cov_deviation)
        )?;
    }
    writeln!(w, "# decreasing {}", trend.join(" "))?;
    w.flush()?;
    writeln!(out, "decreasing {}", trend.join(" "))?;
    writeln!(out, "wrote {}", file_name(&path))?;
    Ok(())
}
