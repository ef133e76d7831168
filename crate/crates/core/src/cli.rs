//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 non-convergence (results are still written), 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_gnls, fit_nlme, fit_nls, CovarianceStructure, Estimator, FitResult, FixedEffectsSpec, RandomEffectsSpec,
};
use crate::inference::{
    ed_table, predict_curves, relative_potency_with, write_curves_csv, write_rp_csv, CiScale, EdTable, Series,
};
use crate::marginal::Method;
use crate::models::{parse_param_list, ModelFamily, Param};
use crate::simulation::{log_spaced, parse_scenario, run_study, summary_to_csv, Arm, Correlation, Scenario, StudyConfig, StudySummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Grid size for `predict` when no doses are given.
pub const DEFAULT_GRID_POINTS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "medose", version, about = "Mixed-effects dose-response fitting and marginalized effective doses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a dose-response model and write the fit as JSON.
    Fit(FitArgs),
    /// Effective doses with delta-method standard errors.
    Ed(EdArgs),
    /// Relative potencies between curves.
    Rp(RpArgs),
    /// Fitted curves over a dose grid.
    Predict(PredictArgs),
    /// Simulation study summary.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Input CSV with dose, response, cluster and optional curve columns.
    #[arg(long)]
    data: Option<PathBuf>,
    /// LL3, LL4 or LL5.
    #[arg(long)]
    model: Option<String>,
    /// nls, gnls or nlme; defaults to nlme when --random is given, else nls.
    #[arg(long)]
    estimator: Option<String>,
    /// Parameters carrying random effects, e.g. `b,d,e`.
    #[arg(long)]
    random: Option<String>,
    /// Random-effects covariance: diag or un.
    #[arg(long = "re-cov", default_value = "un")]
    re_cov: String,
    /// Parameters estimated per curve (`all`, `none` or a list); the rest are shared.
    #[arg(long, default_value = "all")]
    separate: String,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output file; standard output when omitted. Metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Stored fit (JSON written by `fit`); otherwise the model is fitted from --data.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Quadrature points per random-effect dimension.
    #[arg(long = "quad-points", default_value_t = 9)]
    quad_points: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write the fit JSON; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EdArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Effect levels in percent.
    #[arg(long, default_value = "10,50,90")]
    alphas: String,
    /// conditional, marginalized or marginal (comma list); defaults follow the estimator.
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct RpArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "10,50,90")]
    alphas: String,
    #[arg(long)]
    method: Option<String>,
    /// Confidence level of the Wald interval.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Form the interval on the log scale.
    #[arg(long = "log-ci")]
    log_ci: bool,
    /// Numerator and denominator curve, e.g. `A,B`; all ordered pairs otherwise.
    #[arg(long)]
    curves: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Series: conditional, marginalized, cluster (comma list).
    #[arg(long)]
    which: Option<String>,
    /// Curve to predict; all curves when omitted.
    #[arg(long)]
    curve: Option<String>,
    /// Explicit dose grid; otherwise a log grid over the data's dose range.
    #[arg(long)]
    doses: Option<String>,
    #[arg(long = "grid-points", default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario file; the reference scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cluster counts (comma list).
    #[arg(long, default_value = "2,5,10,20")]
    m: String,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "10,50,90")]
    alphas: String,
    /// Fitted models: nls, gnls, nlme_un, nlme_diag.
    #[arg(long, default_value = "nlme_un,nlme_diag,gnls,nls")]
    estimators: String,
    /// Override the scenario's true correlation: unstructured or diagonal.
    #[arg(long)]
    correlation: Option<String>,
    /// Multiply the standard deviation of the `e` random effect.
    #[arg(long = "sigma-e-scale")]
    sigma_e_scale: Option<f64>,
    #[arg(long = "quad-points", default_value_t = 9)]
    quad_points: usize,
    /// Monte Carlo draws for the true marginal effective doses.
    #[arg(long = "truth-samples", default_value_t = 100_000)]
    truth_samples: usize,
    #[command(flatten)]
    output: OutputArgs,
}

/// Reproducibility record written next to every output.
#[derive(Debug, Serialize)]
struct Metadata {
    version: &'static str,
    command: &'static str,
    quad_points: usize,
    seed: u64,
    estimator: String,
    timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<serde_json::Value>,
}

impl Metadata {
    fn new(command: &'static str, quad_points: usize, seed: u64, estimator: String) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Metadata { version: env!("CARGO_PKG_VERSION"), command, quad_points, seed, estimator, timestamp, details: None }
    }
}

/// Map an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Method(_) | Error::InvalidParameter(_) | Error::Lookup(_) => EXIT_CONFIG,
        Error::Schema(_)
        | Error::Parse { .. }
        | Error::Validation { .. }
        | Error::DegenerateData(_)
        | Error::InvalidFit(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
        Error::Domain(_) | Error::RankDeficient(_) | Error::Resource(_) | Error::NoSolution(_) | Error::Evaluation(_) => {
            EXIT_NUMERIC
        }
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Ed(a) => cmd_ed(a),
        Command::Rp(a) => cmd_rp(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("warning: the fit did not converge; results were written but should not be trusted");
            EXIT_NOT_CONVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(e.to_string())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| Error::Config(format!("{what}: {e}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{what}: empty list")));
    }
    Ok(items)
}

/// Percent list to fractions in `(0, 1)`.
fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    parse_list::<f64>(s, "--alphas")?
        .into_iter()
        .map(|p| {
            if p > 0.0 && p < 100.0 {
                Ok(p / 100.0)
            } else {
                Err(Error::Config(format!("--alphas are percents in (0, 100), got {p}")))
            }
        })
        .collect()
}

fn load_data(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Io(io::Error::new(io::ErrorKind::NotFound, format!("{}: no such file", path.display()))));
    }
    Dataset::load_csv(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

struct ModelSpec {
    family: ModelFamily,
    estimator: Estimator,
    fixed: FixedEffectsSpec,
    random: Option<RandomEffectsSpec>,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let family: ModelFamily = self
            .model
            .as_deref()
            .ok_or_else(|| Error::Config("--model is required to fit (LL3, LL4 or LL5)".into()))?
            .parse()
            .map_err(config)?;
        let random = match self.random.as_deref().map(str::trim) {
            None | Some("") => Vec::new(),
            Some(list) => parse_param_list(list).map_err(config)?,
        };
        let estimator = match self.estimator.as_deref() {
            Some(s) => s.parse::<Estimator>().map_err(config)?,
            None if random.is_empty() => Estimator::NLS,
            None => Estimator::NLME,
        };
        match (estimator, random.is_empty()) {
            (Estimator::NLME, true) => return Err(Error::Config("--estimator nlme needs --random".into())),
            (Estimator::NLS | Estimator::GNLS, false) => {
                return Err(Error::Config(format!("--random requires --estimator nlme, got {estimator}")))
            }
            _ => {}
        }
        let fixed = match self.separate.trim().to_ascii_lowercase().as_str() {
            "all" => FixedEffectsSpec::all_separate(family),
            "none" => FixedEffectsSpec::all_shared(family),
            list => {
                let params = parse_param_list(list).map_err(config)?;
                if let Some(p) = params.iter().find(|p| family.position(**p).is_none()) {
                    return Err(Error::Config(format!("{family} has no free parameter `{p}`")));
                }
                FixedEffectsSpec::with_separate(family, &params)
            }
        };
        let random = if random.is_empty() {
            None
        } else {
            let structure: CovarianceStructure = self.re_cov.parse().map_err(config)?;
            Some(RandomEffectsSpec::new(random, structure))
        };
        Ok(ModelSpec { family, estimator, fixed, random })
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))
    }

    fn fit(&self) -> Result<FitResult> {
        let spec = self.spec()?;
        let ds = load_data(self.data_path()?)?;
        eprintln!(
            "fitting {} {} to {} observations in {} clusters",
            spec.estimator,
            spec.family,
            ds.len(),
            ds.n_clusters()
        );
        match (spec.estimator, &spec.random) {
            (Estimator::NLS, _) => fit_nls(&ds, spec.family, &spec.fixed),
            (Estimator::GNLS, _) => fit_gnls(&ds, spec.family, &spec.fixed),
            (Estimator::NLME, Some(re)) => fit_nlme(&ds, spec.family, &spec.fixed, re),
            (Estimator::NLME, None) => unreachable!("checked in spec()"),
        }
    }
}

impl SourceArgs {
    fn load(&self) -> Result<FitResult> {
        if self.quad_points == 0 {
            return Err(Error::Config("--quad-points must be positive".into()));
        }
        match &self.fit {
            Some(path) => {
                if self.model.model.is_some() || self.model.random.is_some() || self.model.estimator.is_some() {
                    return Err(Error::Config("give either --fit or model flags, not both".into()));
                }
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
                FitResult::from_json_str(&text)
            }
            None => self.model.fit(),
        }
    }
}

fn default_methods(fit: &FitResult) -> Vec<Method> {
    match fit.estimator {
        Estimator::NLME => vec![Method::Conditional, Method::Marginalized],
        _ => vec![Method::Marginal],
    }
}

fn primary_method(fit: &FitResult) -> Method {
    match fit.estimator {
        Estimator::NLME => Method::Marginalized,
        _ => Method::Marginal,
    }
}

fn emit(output: &OutputArgs, body: &[u8], meta: &Metadata) -> Result<()> {
    let meta_json = serde_json::to_string_pretty(meta)?;
    match &output.out {
        Some(path) => {
            fs::write(path, body)?;
            let mut sidecar = path.clone().into_os_string();
            sidecar.push(".meta.json");
            fs::write(PathBuf::from(sidecar), meta_json + "\n")?;
        }
        None => {
            io::stdout().write_all(body)?;
            eprintln!("metadata: {}", serde_json::to_string(meta)?);
        }
    }
    Ok(())
}

fn json_line<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn print_summary(fit: &FitResult) {
    let mut err = io::stderr().lock();
    let status = if fit.converged { "converged" } else { "did not converge" };
    let _ = writeln!(err, "{} {} {} after {} iterations", fit.estimator, fit.family, status, fit.iterations);
    let _ = writeln!(err, "log-likelihood {:.6}", fit.loglik);
    let _ = writeln!(err, "{:<12} {:>14} {:>14}", "parameter", "estimate", "std_error");
    for ((name, est), se) in fit.beta_names.iter().zip(&fit.beta_hat).zip(fit.std_errors()) {
        let _ = writeln!(err, "{name:<12} {est:>14.6} {se:>14.6}");
    }
    if let (Some(spec), Some(sds)) = (&fit.random_spec, fit.random_sds()) {
        let _ = writeln!(err, "random effects ({:?})", spec.covariance_structure);
        for (p, sd) in spec.random_parameters.iter().zip(&sds) {
            let _ = writeln!(err, "  sd({p}) {sd:.6}");
        }
        if let Some(g) = fit.g_matrix() {
            for i in 0..g.nrows() {
                for j in 0..i {
                    let r = g[(i, j)] / (sds[i] * sds[j]);
                    if r.is_finite() {
                        let (pi, pj) = (spec.random_parameters[i], spec.random_parameters[j]);
                        let _ = writeln!(err, "  cor({pi},{pj}) {r:.4}");
                    }
                }
            }
        }
    }
    let _ = writeln!(err, "residual sd {:.6}", fit.sigma_hat);
    if let Some(rho) = fit.rho_hat {
        let boundary = if fit.rho_at_boundary { " (at the boundary)" } else { "" };
        let _ = writeln!(err, "within-cluster correlation {rho:.6}{boundary}");
    }
}

fn cmd_fit(args: FitArgs) -> Result<bool> {
    let fit = args.model.fit()?;
    print_summary(&fit);
    let json = fit.to_json()? + "\n";
    let meta = Metadata::new("fit", 0, args.seed, fit.estimator.to_string());
    emit(&OutputArgs { out: args.out, format: Format::Json }, json.as_bytes(), &meta)?;
    Ok(fit.converged)
}

fn cmd_ed(args: EdArgs) -> Result<bool> {
    let alphas = parse_alphas(&args.alphas)?;
    let methods = match &args.method {
        Some(s) => Some(parse_list::<Method>(s, "--method")?),
        None => None,
    };
    let fit = args.source.load()?;
    let methods = methods.unwrap_or_else(|| default_methods(&fit));
    let mut table = EdTable::default();
    for method in &methods {
        table.rows.extend(ed_table(&fit, &alphas, *method, args.source.quad_points)?.rows);
    }
    let body = match args.output.format {
        Format::Csv => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            buf
        }
        Format::Json => (table.to_json()? + "\n").into_bytes(),
    };
    let mut meta = Metadata::new("ed", args.source.quad_points, args.source.seed, fit.estimator.to_string());
    meta.details = Some(serde_json::json!({ "methods": methods }));
    emit(&args.output, &body, &meta)?;
    Ok(fit.converged)
}

fn potency_pairs(fit: &FitResult, curves: Option<&str>) -> Result<Vec<(String, String)>> {
    if fit.curves.len() < 2 {
        return Err(Error::Config(format!("relative potency needs two curves, the fit has {}", fit.curves.len())));
    }
    match curves {
        Some(s) => {
            let ids: Vec<String> = parse_list(s, "--curves")?;
            match ids.as_slice() {
                [a, b] if a != b => {
                    for id in [a, b] {
                        fit.curve_index(id).map_err(config)?;
                    }
                    Ok(vec![(a.clone(), b.clone())])
                }
                _ => Err(Error::Config("--curves takes two distinct curve ids".into())),
            }
        }
        None => {
            let c = &fit.curves;
            Ok((0..c.len()).flat_map(|i| (i + 1..c.len()).map(move |j| (c[i].clone(), c[j].clone()))).collect())
        }
    }
}

fn cmd_rp(args: RpArgs) -> Result<bool> {
    let alphas = parse_alphas(&args.alphas)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Config(format!("--level must lie in (0, 1), got {}", args.level)));
    }
    let method = args.method.as_deref().map(|s| s.parse::<Method>().map_err(config)).transpose()?;
    let fit = args.source.load()?;
    let method = method.unwrap_or_else(|| primary_method(&fit));
    let pairs = potency_pairs(&fit, args.curves.as_deref())?;
    let scale = if args.log_ci { CiScale::Log } else { CiScale::Linear };
    let mut rows = Vec::new();
    for (a, b) in &pairs {
        for &alpha in &alphas {
            rows.push(relative_potency_with(&fit, a, b, alpha, method, args.source.quad_points, args.level, scale)?);
        }
    }
    let body = match args.output.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_rp_csv(&mut buf, &rows)?;
            buf
        }
        Format::Json => json_line(&rows)?,
    };
    let mut meta = Metadata::new("rp", args.source.quad_points, args.source.seed, fit.estimator.to_string());
    meta.details = Some(serde_json::json!({ "method": method, "level": args.level, "log_ci": args.log_ci }));
    emit(&args.output, &body, &meta)?;
    Ok(fit.converged)
}

/// `points` log-spaced doses over the positive range, plus 0 when present.
fn dose_grid(ds: &Dataset, points: usize) -> Result<Vec<f64>> {
    if points == 0 {
        return Err(Error::Config("--grid-points must be positive".into()));
    }
    let doses = ds.observations().iter().map(|o| o.dose);
    let has_zero = doses.clone().any(|d| d == 0.0);
    let positive: Vec<f64> = doses.filter(|d| *d > 0.0).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(0.0, f64::max);
    let mut grid = if positive.is_empty() {
        Vec::new()
    } else if points == 1 || lo == hi {
        vec![lo]
    } else {
        log_spaced(lo, hi, points)
    };
    if has_zero {
        grid.insert(0, 0.0);
    }
    if grid.is_empty() {
        return Err(Error::DegenerateData("no doses to build a grid from".into()));
    }
    Ok(grid)
}

fn cmd_predict(args: PredictArgs) -> Result<bool> {
    let which = args.which.as_deref().map(|s| parse_list::<Series>(s, "--which")).transpose()?;
    let explicit = args.doses.as_deref().map(|s| parse_list::<f64>(s, "--doses")).transpose()?;
    let fit = args.source.load()?;
    let doses = match explicit {
        Some(d) => d,
        None => match &args.source.model.data {
            Some(path) => dose_grid(&load_data(path)?, args.grid_points)?,
            None => return Err(Error::Config("predict needs --doses or --data for the dose grid".into())),
        },
    };
    let which = which.unwrap_or_else(|| match fit.estimator {
        Estimator::NLME => vec![Series::Conditional, Series::Marginalized, Series::ClusterSpecific],
        _ => vec![Series::Conditional],
    });
    let curves = match &args.curve {
        Some(c) => {
            fit.curve_index(c).map_err(config)?;
            vec![c.clone()]
        }
        None => fit.curves.clone(),
    };
    let mut points = Vec::new();
    for curve in &curves {
        let mut rows = predict_curves(&fit, curve, &doses, &which, args.source.quad_points)?;
        if curves.len() > 1 {
            for r in &mut rows {
                r.series_label = format!("{curve}/{}", r.series_label);
            }
        }
        points.extend(rows);
    }
    let body = match args.output.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_curves_csv(&mut buf, &points)?;
            buf
        }
        Format::Json => json_line(&points)?,
    };
    let mut meta = Metadata::new("predict", args.source.quad_points, args.source.seed, fit.estimator.to_string());
    meta.details = Some(serde_json::json!({ "series": which, "curves": curves }));
    emit(&args.output, &body, &meta)?;
    Ok(fit.converged)
}

fn cmd_simulate(args: SimulateArgs) -> Result<bool> {
    let mut scenario = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            parse_scenario(&text)?
        }
        None => Scenario::default(),
    };
    if let Some(c) = &args.correlation {
        let correlation = match c.trim().to_ascii_lowercase().as_str() {
            "unstructured" | "un" => Correlation::Unstructured,
            "diagonal" | "diag" => Correlation::Diagonal,
            other => return Err(Error::Config(format!("unknown correlation `{other}`"))),
        };
        scenario = scenario.with_correlation(correlation);
    }
    if let Some(k) = args.sigma_e_scale {
        if !(k.is_finite() && k >= 0.0) {
            return Err(Error::Config(format!("--sigma-e-scale must be finite and nonnegative, got {k}")));
        }
        scenario = scenario.with_sigma_e_scale(k);
    }
    if args.quad_points == 0 {
        return Err(Error::Config("--quad-points must be positive".into()));
    }
    let m_list: Vec<usize> = parse_list(&args.m, "--m")?;
    let arms: Vec<Arm> = parse_list(&args.estimators, "--estimators")?;
    let base = StudyConfig {
        m_list: Vec::new(),
        replicates: args.replicates,
        alphas: parse_alphas(&args.alphas)?,
        arms: arms.clone(),
        quad_points: args.quad_points,
        seed: args.seed,
        truth_samples: args.truth_samples,
        threads: None,
    };
    if args.truth_samples < 1000 {
        return Err(Error::Config("--truth-samples must be at least 1000".into()));
    }

    // Replicate seeds depend only on (seed, m, replicate), so running one
    // cluster count at a time gives the same numbers as a single call.
    let mut summary = StudySummary::default();
    let mut truth = Vec::new();
    let mut clamped = 0;
    for &m in &m_list {
        eprintln!("simulating m = {m}: {} replicates", args.replicates);
        let result = run_study(&scenario, &StudyConfig { m_list: vec![m], ..base.clone() })?;
        let failed: usize = result.summary.cells.iter().map(|c| c.n_failed).sum();
        eprintln!("  done; {failed} failed estimates across {} cells", result.summary.cells.len());
        summary.cells.extend(result.summary.cells);
        truth = result.truth;
        clamped += result.clamped_clusters;
    }

    let body = match args.output.format {
        Format::Csv => {
            let mut buf = Vec::new();
            summary_to_csv(&summary, &mut buf)?;
            buf
        }
        Format::Json => json_line(&summary)?,
    };
    let labels: Vec<&str> = arms.iter().map(|a| a.label()).collect();
    let mut meta = Metadata::new("simulate", args.quad_points, args.seed, labels.join(","));
    meta.details = Some(serde_json::json!({
        "replicates": args.replicates,
        "m": m_list,
        "truth_samples": args.truth_samples,
        "true_marginal_ed": truth.iter().map(|(a, ed, se)| serde_json::json!({ "alpha": a * 100.0, "ed": ed, "mc_std_error": se })).collect::<Vec<_>>(),
        "clamped_clusters": clamped,
        "scenario": {
            "family": scenario.family.to_string(),
            "fixed_effects": scenario.fixed_effects,
            "random_parameters": scenario.random_parameters.iter().map(|p: &Param| p.name()).collect::<Vec<_>>(),
            "random_sd": scenario.random_sd,
            "correlation": format!("{:?}", scenario.correlation).to_lowercase(),
            "residual_sd": scenario.residual_sd,
            "doses": scenario.doses,
            "obs_per_dose": scenario.obs_per_dose,
        },
    }));
    emit(&args.output, &body, &meta)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Method("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Schema("dose".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Parse { row: 2, msg: "x".into() }), EXIT_DATA);
        assert_eq!(exit_code(&Error::RankDeficient("x".into())), EXIT_NUMERIC);
    }

    #[test]
    fn alphas_are_percents() {
        assert_eq!(parse_alphas("10, 50,90").unwrap(), vec![0.1, 0.5, 0.9]);
        for bad in ["0", "100", "abc", ""] {
            assert!(matches!(parse_alphas(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn clap_errors_are_config_errors() {
        assert_eq!(run(["medose", "fit", "--bogus"]), EXIT_CONFIG);
        assert_eq!(run(["medose"]), EXIT_CONFIG);
        assert_eq!(run(["medose", "--version"]), EXIT_OK);
    }

    #[test]
    fn random_effects_imply_nlme() {
        let args = |random: Option<&str>, est: Option<&str>| ModelArgs {
            data: None,
            model: Some("LL3".into()),
            estimator: est.map(String::from),
            random: random.map(String::from),
            re_cov: "un".into(),
            separate: "all".into(),
        };
        assert_eq!(args(Some("b,d"), None).spec().unwrap().estimator, Estimator::NLME);
        assert_eq!(args(None, None).spec().unwrap().estimator, Estimator::NLS);
        assert!(matches!(args(Some("b"), Some("gnls")).spec(), Err(Error::Config(_))));
        assert!(matches!(args(None, Some("nlme")).spec(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_spans_positive_doses_and_keeps_zero() {
        let ds = Dataset::from_reader("dose,response,cluster\n0,1,a\n0.1,2,a\n10,3,b\n".as_bytes()).unwrap();
        let grid = dose_grid(&ds, 100).unwrap();
        assert_eq!(grid.len(), 101);
        assert_eq!(grid[0], 0.0);
        assert!((grid[1] - 0.1).abs() < 1e-15 && (grid[100] - 10.0).abs() < 1e-12);
        assert_eq!(dose_grid(&ds, 1).unwrap(), vec![0.0, 0.1]);
    }
}
