//! Effective-dose tables, relative potencies and fitted-curve exports.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Estimator, FitResult, FixedLayout};
use crate::marginal::{delta_method, DerivedEstimate, Marginalizer, Method};
use crate::models::{check_alpha, ed_full, eval_full, validate_full, Param};
use crate::normal::inverse_cdf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdRow {
    pub curve_id: String,
    /// Effect level in percent.
    pub alpha: f64,
    pub method: Method,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdTable {
    pub rows: Vec<EdRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativePotency {
    pub numerator_curve: String,
    pub denominator_curve: String,
    /// Effect level in percent.
    pub alpha: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

/// Scale on which Wald limits for a ratio are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CiScale {
    #[default]
    Linear,
    /// Symmetric on the log ratio, back-transformed.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Conditional,
    Marginalized,
    ClusterSpecific,
}

impl FromStr for Series {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conditional" => Ok(Series::Conditional),
            "marginalized" | "marginalised" => Ok(Series::Marginalized),
            "cluster" | "cluster_specific" | "cluster-specific" => Ok(Series::ClusterSpecific),
            other => Err(Error::Config(format!("unknown series `{other}`"))),
        }
    }
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Series::Conditional => "conditional",
            Series::Marginalized => "marginalized",
            Series::ClusterSpecific => "cluster_specific",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub dose: f64,
    pub series_label: String,
    pub value: f64,
}

/// `estimate -/+ z * std_error` with `z` the `(1 + level) / 2` normal
/// quantile.
pub fn wald_ci(estimate: f64, std_error: f64, level: f64) -> (f64, f64) {
    let z = inverse_cdf(0.5 * (1.0 + level));
    (estimate - z * std_error, estimate + z * std_error)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn check_method(fit: &FitResult, method: Method) -> Result<()> {
    match (method, fit.estimator) {
        (Method::Marginalized, Estimator::NLME) => Ok(()),
        (Method::Marginalized, other) => Err(Error::Method(format!(
            "marginalized effective doses need an nlme fit, got {other}"
        ))),
        (Method::Marginal, Estimator::NLME) => Err(Error::Method(
            "marginal effective doses come from nls or gnls fits; use conditional or marginalized for nlme".into(),
        )),
        _ => Ok(()),
    }
}

/// The effective dose of curve `k` as a function of the fixed effects.
struct EdFunctional {
    layout: FixedLayout,
    curve: usize,
    alpha: f64,
    marginalizer: Option<Marginalizer>,
}

impl EdFunctional {
    fn new(fit: &FitResult, curve_id: &str, alpha: f64, method: Method, n: usize) -> Result<Self> {
        check_alpha(alpha)?;
        check_method(fit, method)?;
        let curve = fit.curve_index(curve_id)?;
        let marginalizer = match method {
            Method::Marginalized => Some(Marginalizer::from_fit(fit, curve_id, n)?),
            _ => None,
        };
        Ok(EdFunctional { layout: fit.layout()?, curve, alpha, marginalizer })
    }

    fn eval(&self, beta: &[f64]) -> Result<f64> {
        let full = self.layout.curve_full(beta, self.curve);
        validate_full(&full)?;
        match &self.marginalizer {
            Some(m) => m.with_base(full).ed(self.alpha),
            None => Ok(ed_full(&full, self.alpha)),
        }
    }
}

/// Effective dose with delta-method standard error.
pub fn effective_dose(fit: &FitResult, curve_id: &str, alpha: f64, method: Method, n: usize) -> Result<DerivedEstimate> {
    let functional = EdFunctional::new(fit, curve_id, alpha, method, n)?;
    delta_method(fit, |b| functional.eval(b), method)
}

/// One row per `(curve, alpha)`; `alphas` are fractions in `(0, 1)`.
pub fn ed_table(fit: &FitResult, alphas: &[f64], method: Method, n: usize) -> Result<EdTable> {
    check_method(fit, method)?;
    let mut rows = Vec::with_capacity(fit.curves.len() * alphas.len());
    for curve in &fit.curves {
        for &alpha in alphas {
            let est = effective_dose(fit, curve, alpha, method, n)?;
            rows.push(EdRow {
                curve_id: curve.clone(),
                alpha: percent(alpha),
                method,
                estimate: est.value,
                std_error: est.std_error,
            });
        }
    }
    Ok(EdTable { rows })
}

fn percent(alpha: f64) -> f64 {
    // keep 10.0 rather than 10.000000000000002
    (alpha * 100.0 * 1e9).round() / 1e9
}

/// Ratio of the effective doses of two curves with an untransformed Wald
/// interval.
pub fn relative_potency(
    fit: &FitResult,
    curve_a: &str,
    curve_b: &str,
    alpha: f64,
    method: Method,
    n: usize,
    level: f64,
) -> Result<RelativePotency> {
    relative_potency_with(fit, curve_a, curve_b, alpha, method, n, level, CiScale::Linear)
}

#[allow(clippy::too_many_arguments)]
pub fn relative_potency_with(
    fit: &FitResult,
    curve_a: &str,
    curve_b: &str,
    alpha: f64,
    method: Method,
    n: usize,
    level: f64,
    scale: CiScale,
) -> Result<RelativePotency> {
    check_level(level)?;
    let num = EdFunctional::new(fit, curve_a, alpha, method, n)?;
    let den = EdFunctional::new(fit, curve_b, alpha, method, n)?;
    let ratio = |b: &[f64]| -> Result<f64> {
        let d = den.eval(b)?;
        if !d.is_finite() || d.abs() <= 1e-300 {
            return Err(Error::Domain(format!("effective dose of curve `{curve_b}` is {d}; ratio undefined")));
        }
        Ok(num.eval(b)? / d)
    };
    if let Err(e @ Error::Domain(_)) = ratio(&fit.beta_hat) {
        return Err(e);
    }
    let est = delta_method(fit, ratio, method)?;
    let (ci_lower, ci_upper) = match scale {
        CiScale::Linear => wald_ci(est.value, est.std_error, level),
        CiScale::Log => {
            let (lo, hi) = wald_ci(est.value.ln(), est.std_error / est.value, level);
            (lo.exp(), hi.exp())
        }
    };
    Ok(RelativePotency {
        numerator_curve: curve_a.to_string(),
        denominator_curve: curve_b.to_string(),
        alpha: percent(alpha),
        estimate: est.value,
        std_error: est.std_error,
        ci_lower,
        ci_upper,
        level,
    })
}

/// Fitted curves of one treatment over `doses`.
pub fn predict_curves(fit: &FitResult, curve_id: &str, doses: &[f64], which: &[Series], n: usize) -> Result<Vec<CurvePoint>> {
    if doses.is_empty() {
        return Err(Error::Domain("dose grid is empty".into()));
    }
    if let Some(bad) = doses.iter().find(|d| d.is_nan() || **d < 0.0) {
        return Err(Error::Domain(format!("dose must be nonnegative, got {bad}")));
    }
    let k = fit.curve_index(curve_id)?;
    let layout = fit.layout()?;
    let base = layout.curve_full(&fit.beta_hat, k);
    let mut out = Vec::new();
    for series in which {
        match series {
            Series::Conditional => {
                out.extend(doses.iter().map(|&d| CurvePoint { dose: d, series_label: "conditional".into(), value: eval_full(&base, d) }));
            }
            Series::Marginalized => {
                let m = Marginalizer::from_fit(fit, curve_id, n)?;
                out.extend(doses.iter().map(|&d| CurvePoint { dose: d, series_label: "marginalized".into(), value: m.predict(d).value }));
            }
            Series::ClusterSpecific => {
                let (Some(spec), Some(eblups)) = (&fit.random_spec, &fit.eblups) else {
                    return Err(Error::Method(format!(
                        "cluster-specific curves need an nlme fit with random-effect predictions, got {}",
                        fit.estimator
                    )));
                };
                for (cluster, b) in eblups {
                    let in_curve = fit.cluster_curves.get(cluster).is_none_or(|cs| cs.iter().any(|c| c == curve_id));
                    if !in_curve {
                        continue;
                    }
                    let full = shifted(base, &spec.random_parameters, b);
                    let label = format!("cluster:{cluster}");
                    out.extend(doses.iter().map(|&d| CurvePoint { dose: d, series_label: label.clone(), value: eval_full(&full, d) }));
                }
            }
        }
    }
    Ok(out)
}

fn shifted(mut full: [f64; 5], random: &[Param], b: &[f64]) -> [f64; 5] {
    for (p, v) in random.iter().zip(b) {
        full[p.index()] += v;
    }
    for p in [Param::E, Param::F] {
        let i = p.index();
        full[i] = full[i].max(crate::marginal::NODE_FLOOR * full[i].abs().max(f64::MIN_POSITIVE));
    }
    full
}

fn write_csv_rows<W: Write, S: Serialize>(writer: W, rows: &[S], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub const ED_COLUMNS: [&str; 5] = ["curve_id", "alpha", "method", "estimate", "std_error"];
pub const RP_COLUMNS: [&str; 8] =
    ["numerator_curve", "denominator_curve", "alpha", "estimate", "std_error", "ci_lower", "ci_upper", "level"];
pub const CURVE_COLUMNS: [&str; 3] = ["dose", "series_label", "value"];

impl EdTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv_rows(writer, &self.rows, &ED_COLUMNS)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}

pub fn write_rp_csv<W: Write>(writer: W, rows: &[RelativePotency]) -> Result<()> {
    write_csv_rows(writer, rows, &RP_COLUMNS)
}

pub fn write_curves_csv<W: Write>(writer: W, rows: &[CurvePoint]) -> Result<()> {
    write_csv_rows(writer, rows, &CURVE_COLUMNS)
}
