use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{generate_detailed, mc_true_ed_detailed, Scenario};
use crate::data::DEFAULT_CURVE;
use crate::error::{Error, Result};
use crate::estimators::{fit_gnls, fit_nlme, fit_nls, CovarianceStructure, FitResult, FixedEffectsSpec, RandomEffectsSpec};
use crate::inference::effective_dose;
use crate::marginal::Method;
use crate::rng::split_seed;

/// One fitted model in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Nls,
    Gnls,
    Nlme(CovarianceStructure),
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nls" => Ok(Arm::Nls),
            "gnls" => Ok(Arm::Gnls),
            "nlme_un" | "nlme" => Ok(Arm::Nlme(CovarianceStructure::Unstructured)),
            "nlme_diag" => Ok(Arm::Nlme(CovarianceStructure::Diagonal)),
            other => Err(Error::Config(format!("unknown study arm `{other}` (nls, gnls, nlme_un, nlme_diag)"))),
        }
    }
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Nls => "nls",
            Arm::Gnls => "gnls",
            Arm::Nlme(CovarianceStructure::Unstructured) => "nlme_un",
            Arm::Nlme(CovarianceStructure::Diagonal) => "nlme_diag",
        }
    }

    pub fn methods(self) -> &'static [Method] {
        match self {
            Arm::Nls | Arm::Gnls => &[Method::Marginal],
            Arm::Nlme(_) => &[Method::Marginalized, Method::Conditional],
        }
    }

    fn fit(self, ds: &crate::data::Dataset, scenario: &Scenario) -> Result<FitResult> {
        let family = scenario.family;
        let fixed = FixedEffectsSpec::all_shared(family);
        match self {
            Arm::Nls => fit_nls(ds, family, &fixed),
            Arm::Gnls => fit_gnls(ds, family, &fixed),
            Arm::Nlme(structure) => {
                let re = RandomEffectsSpec::new(scenario.random_parameters.clone(), structure);
                fit_nlme(ds, family, &fixed, &re)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub m_list: Vec<usize>,
    pub replicates: usize,
    /// Effect levels as fractions in `(0, 1)`.
    pub alphas: Vec<f64>,
    pub arms: Vec<Arm>,
    pub quad_points: usize,
    pub seed: u64,
    pub truth_samples: usize,
    /// Worker threads; `None` reads `MEDOSE_THREADS`, then uses all cores.
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            m_list: vec![2, 5, 10, 20],
            replicates: 200,
            alphas: vec![0.1, 0.5, 0.9],
            arms: vec![
                Arm::Nlme(CovarianceStructure::Unstructured),
                Arm::Nlme(CovarianceStructure::Diagonal),
                Arm::Gnls,
                Arm::Nls,
            ],
            quad_points: 9,
            seed: 1,
            truth_samples: 100_000,
            threads: None,
        }
    }
}

/// Outcome of one derived quantity in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub m: usize,
    pub replicate: usize,
    pub estimator: &'static str,
    pub method: Method,
    pub alpha: f64,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub m: usize,
    pub estimator: &'static str,
    pub method: Method,
    /// Effect level in percent.
    pub alpha: f64,
    pub median_deviation: f64,
    pub median_se: f64,
    pub n_converged: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StudySummary {
    pub cells: Vec<CellSummary>,
}

impl StudySummary {
    pub fn cell(&self, m: usize, estimator: &str, method: Method, alpha_percent: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.m == m && c.estimator == estimator && c.method == method && (c.alpha - alpha_percent).abs() < 1e-9)
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub summary: StudySummary,
    pub records: Vec<ReplicateRecord>,
    /// `(alpha, true marginal ED, Monte Carlo SE)`.
    pub truth: Vec<(f64, f64, f64)>,
    /// Simulated clusters whose `d` or `e` hit the positivity floor.
    pub clamped_clusters: usize,
}

pub const SUMMARY_COLUMNS: [&str; 8] =
    ["m", "estimator", "method", "alpha", "median_deviation", "median_se", "n_converged", "n_failed"];

fn thread_count(requested: Option<usize>) -> Result<usize> {
    if let Some(t) = requested {
        return Ok(t);
    }
    match std::env::var("MEDOSE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("MEDOSE_THREADS must be a nonnegative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

/// Fit every arm to replicated simulated datasets and summarize the
/// deviation of each effective-dose estimate from the Monte Carlo truth.
///
/// Replicate `r` at cluster count `m` uses its own seed split from the
/// master seed, and results are gathered in schedule order, so the output
/// does not depend on the number of threads.
pub fn run_study(scenario: &Scenario, config: &StudyConfig) -> Result<StudyResult> {
    scenario.validate()?;
    if config.replicates < 1 {
        return Err(Error::Config("replicates must be at least one".into()));
    }
    for &a in &config.alphas {
        crate::models::check_alpha(a).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(&m) = config.m_list.iter().find(|&&m| m < 2) {
        return Err(Error::Config(format!("cluster counts must be at least two, got {m}")));
    }

    let truth_seed = split_seed(config.seed, 1 << 40);
    let truth = config
        .alphas
        .iter()
        .map(|&a| mc_true_ed_detailed(scenario, a, config.truth_samples, truth_seed).map(|(ed, se)| (a, ed, se)))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> =
        config.m_list.iter().flat_map(|&m| (0..config.replicates).map(move |r| (m, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(config.threads)?)
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<(Vec<ReplicateRecord>, usize)>> =
        pool.install(|| jobs.par_iter().map(|&(m, r)| replicate(scenario, config, m, r)).collect());

    let mut records = Vec::new();
    let mut clamped_clusters = 0;
    for outcome in outcomes {
        let (recs, clamped) = outcome?;
        records.extend(recs);
        clamped_clusters += clamped;
    }
    let summary = summarize(config, &truth, &records);
    Ok(StudyResult { summary, records, truth, clamped_clusters })
}

fn replicate(scenario: &Scenario, config: &StudyConfig, m: usize, r: usize) -> Result<(Vec<ReplicateRecord>, usize)> {
    let seed = split_seed(split_seed(config.seed, m as u64), r as u64);
    let generated = generate_detailed(scenario, m, seed)?;
    let mut out = Vec::new();
    for &arm in &config.arms {
        let fit = arm.fit(&generated.dataset, scenario).and_then(|f| {
            if f.converged {
                Ok(f)
            } else {
                Err(Error::NoSolution("fit did not converge".into()))
            }
        });
        for &method in arm.methods() {
            for &alpha in &config.alphas {
                let est = fit.as_ref().map_err(|e| e.to_string()).and_then(|f| {
                    effective_dose(f, DEFAULT_CURVE, alpha, method, config.quad_points).map_err(|e| e.to_string())
                });
                let (estimate, std_error, error) = match est {
                    Ok(d) => (Some(d.value), Some(d.std_error), None),
                    Err(e) => (None, None, Some(e)),
                };
                out.push(ReplicateRecord { m, replicate: r, estimator: arm.label(), method, alpha, estimate, std_error, error });
            }
        }
    }
    Ok((out, generated.clamped))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(config: &StudyConfig, truth: &[(f64, f64, f64)], records: &[ReplicateRecord]) -> StudySummary {
    let mut cells = Vec::new();
    for &m in &config.m_list {
        for &arm in &config.arms {
            for &method in arm.methods() {
                for &(alpha, true_ed, _) in truth {
                    let cell: Vec<&ReplicateRecord> = records
                        .iter()
                        .filter(|r| r.m == m && r.estimator == arm.label() && r.method == method && r.alpha == alpha)
                        .collect();
                    let ok: Vec<(f64, f64)> = cell
                        .iter()
                        .filter_map(|r| Some((r.estimate?, r.std_error?)))
                        .collect();
                    cells.push(CellSummary {
                        m,
                        estimator: arm.label(),
                        method,
                        alpha: (alpha * 100.0 * 1e9).round() / 1e9,
                        median_deviation: median(ok.iter().map(|(e, _)| e - true_ed).collect()),
                        median_se: median(ok.iter().map(|(_, s)| *s).collect()),
                        n_converged: ok.len(),
                        n_failed: cell.len() - ok.len(),
                    });
                }
            }
        }
    }
    StudySummary { cells }
}

/// Long-format summary with the columns of [`SUMMARY_COLUMNS`].
pub fn summary_to_csv<W: Write>(summary: &StudySummary, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(SUMMARY_COLUMNS)?;
    for c in &summary.cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> Scenario {
        Scenario { random_sd: vec![0.0; 3], residual_sd: 1e-3, ..Scenario::default() }
    }

    #[test]
    fn degenerate_scenario_recovers_truth() {
        let config = StudyConfig {
            m_list: vec![3],
            replicates: 1,
            arms: vec![Arm::Nls, Arm::Gnls, Arm::Nlme(CovarianceStructure::Diagonal)],
            truth_samples: 1000,
            ..StudyConfig::default()
        };
        let res = run_study(&quiet(), &config).unwrap();
        for c in &res.summary.cells {
            if c.alpha == 50.0 {
                assert_eq!(c.n_converged + c.n_failed, 1);
                if c.n_converged == 1 {
                    assert!(c.median_deviation.abs() < 1e-3, "{c:?}");
                }
            }
        }
        let nls = res.summary.cell(3, "nls", Method::Marginal, 50.0).unwrap();
        assert_eq!(nls.n_converged, 1);
    }

    #[test]
    fn csv_shape() {
        let mut buf = Vec::new();
        summary_to_csv(&StudySummary::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m,estimator,method,alpha,median_deviation,median_se,n_converged,n_failed\n");
        let one = StudySummary {
            cells: vec![CellSummary {
                m: 10,
                estimator: "gnls",
                method: Method::Marginal,
                alpha: 50.0,
                median_deviation: 0.25,
                median_se: 0.5,
                n_converged: 3,
                n_failed: 1,
            }],
        };
        let mut buf = Vec::new();
        summary_to_csv(&one, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "10,gnls,marginal,50.0,0.25,0.5,3,1");
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let config = StudyConfig {
            m_list: vec![4],
            replicates: 3,
            arms: vec![Arm::Nls, Arm::Gnls],
            truth_samples: 2000,
            ..StudyConfig::default()
        };
        let one = run_study(&Scenario::default(), &StudyConfig { threads: Some(1), ..config.clone() }).unwrap();
        let many = run_study(&Scenario::default(), &StudyConfig { threads: Some(3), ..config }).unwrap();
        assert_eq!(one.records, many.records);
        assert_eq!(one.summary, many.summary);
    }

    #[test]
    fn median_rules() {
        assert!(median(vec![]).is_nan());
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
