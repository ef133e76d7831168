//! Log-logistic dose-response curves.
//!
//! The five-parameter curve is
//!
//! ```text
//! f(x) = c + (d - c) / (1 + exp(b * (ln x - ln e)))^f
//! ```
//!
//! with `b` the steepness, `c`/`d` the lower/upper asymptotes, `e` the
//! inflection location and `f` the asymmetry. `LL4` fixes `f = 1` and `LL3`
//! additionally fixes `c = 0`. A positive `b` describes a response that
//! decreases with dose.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of a single curve parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    B,
    C,
    D,
    E,
    F,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::B, Param::C, Param::D, Param::E, Param::F];

    /// Position in the full `(b, c, d, e, f)` vector.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::B => "b",
            Param::C => "c",
            Param::D => "d",
            Param::E => "e",
            Param::F => "f",
        }
    }

    /// Parameters that must stay strictly positive.
    pub fn is_positive(self) -> bool {
        matches!(self, Param::E | Param::F)
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "b" => Ok(Param::B),
            "c" => Ok(Param::C),
            "d" => Ok(Param::D),
            "e" => Ok(Param::E),
            "f" => Ok(Param::F),
            other => Err(Error::InvalidParameter(format!("unknown parameter name `{other}`"))),
        }
    }
}

/// Parse a comma-separated parameter list such as `"b,d,e"`.
pub fn parse_param_list(s: &str) -> Result<Vec<Param>> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let p: Param = tok.parse()?;
        if out.contains(&p) {
            return Err(Error::InvalidParameter(format!("parameter `{p}` listed twice")));
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    LL3,
    LL4,
    LL5,
}

impl ModelFamily {
    pub fn params(self) -> &'static [Param] {
        match self {
            ModelFamily::LL3 => &[Param::B, Param::D, Param::E],
            ModelFamily::LL4 => &[Param::B, Param::C, Param::D, Param::E],
            ModelFamily::LL5 => &[Param::B, Param::C, Param::D, Param::E, Param::F],
        }
    }

    pub fn parameter_count(self) -> usize {
        self.params().len()
    }

    pub fn parameter_names(self) -> Vec<&'static str> {
        self.params().iter().map(|p| p.name()).collect()
    }

    /// Position of `p` within this family's parameter vector, if free.
    pub fn position(self, p: Param) -> Option<usize> {
        self.params().iter().position(|&q| q == p)
    }

    /// Value a parameter takes when the family fixes it.
    fn fixed_value(p: Param) -> f64 {
        match p {
            Param::C => 0.0,
            Param::F => 1.0,
            _ => f64::NAN,
        }
    }

    /// Expand a family-ordered vector to the full `(b, c, d, e, f)` layout.
    pub fn expand(self, values: &[f64]) -> [f64; 5] {
        let mut full = [0.0, 0.0, 0.0, 0.0, 1.0];
        for p in Param::ALL {
            full[p.index()] = match self.position(p) {
                Some(i) => values[i],
                None => Self::fixed_value(p),
            };
        }
        full
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelFamily::LL3 => "LL3",
            ModelFamily::LL4 => "LL4",
            ModelFamily::LL5 => "LL5",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LL3" | "LL.3" => Ok(ModelFamily::LL3),
            "LL4" | "LL.4" => Ok(ModelFamily::LL4),
            "LL5" | "LL.5" => Ok(ModelFamily::LL5),
            other => Err(Error::InvalidParameter(format!("unknown model family `{other}`"))),
        }
    }
}

/// Parameter values of one curve, ordered as `family.params()`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams {
    family: ModelFamily,
    values: Vec<f64>,
}

impl CurveParams {
    pub fn new(family: ModelFamily, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.parameter_count() {
            return Err(Error::InvalidParameter(format!(
                "{family} expects {} parameters, got {}",
                family.parameter_count(),
                values.len()
            )));
        }
        let cp = CurveParams { family, values };
        cp.validate()?;
        Ok(cp)
    }

    /// Build from a full `(b, c, d, e, f)` vector, dropping the entries the
    /// family fixes.
    pub fn from_full(family: ModelFamily, full: &[f64; 5]) -> Result<Self> {
        let values = family.params().iter().map(|p| full[p.index()]).collect();
        Self::new(family, values)
    }

    fn validate(&self) -> Result<()> {
        let full = self.full();
        validate_full(&full)
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: Param) -> f64 {
        self.full()[p.index()]
    }

    pub fn full(&self) -> [f64; 5] {
        self.family.expand(&self.values)
    }
}

pub(crate) fn validate_full(full: &[f64; 5]) -> Result<()> {
    if let Some(p) = Param::ALL.iter().find(|p| !full[p.index()].is_finite()) {
        return Err(Error::InvalidParameter(format!("parameter `{p}` is not finite")));
    }
    let [b, _, _, e, f] = *full;
    if b == 0.0 {
        return Err(Error::InvalidParameter("steepness b must be nonzero".into()));
    }
    if e <= 0.0 {
        return Err(Error::InvalidParameter(format!("e must be positive, got {e}")));
    }
    if f <= 0.0 {
        return Err(Error::InvalidParameter(format!("f must be positive, got {f}")));
    }
    Ok(())
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Curve value for a full parameter vector, without validation.
///
/// Dose zero and infinite doses return the analytic limits.
#[inline]
pub(crate) fn eval_full(p: &[f64; 5], dose: f64) -> f64 {
    let [b, c, d, e, f] = *p;
    if dose == 0.0 || dose.is_infinite() {
        let (at_zero, at_inf) = asymptotes_full(p);
        return if dose == 0.0 { at_zero } else { at_inf };
    }
    let z = b * (dose.ln() - e.ln());
    if f == 1.0 {
        c + (d - c) / (1.0 + z.exp())
    } else {
        c + (d - c) * (-f * softplus(z)).exp()
    }
}

/// `(f(0), f(inf))` for a full parameter vector.
#[inline]
pub(crate) fn asymptotes_full(p: &[f64; 5]) -> (f64, f64) {
    let [b, c, d, _, f] = *p;
    if b > 0.0 {
        (d, c)
    } else if b < 0.0 {
        (c, d)
    } else {
        let mid = c + (d - c) * (-f * std::f64::consts::LN_2).exp();
        (mid, mid)
    }
}

/// Closed-form effective dose for a full parameter vector.
#[inline]
pub(crate) fn ed_full(p: &[f64; 5], alpha: f64) -> f64 {
    let [b, _, _, e, f] = *p;
    // Fraction of the way from f(0) to f(inf) is 1 - s^-f for b > 0 and
    // s^-f for b < 0, where s = 1 + (x/e)^b.
    let tail = if b > 0.0 { 1.0 - alpha } else { alpha };
    let inner = tail.powf(-1.0 / f) - 1.0;
    e * inner.powf(1.0 / b)
}

pub fn evaluate(family: ModelFamily, params: &CurveParams, dose: f64) -> Result<f64> {
    check_family(family, params)?;
    if dose.is_nan() || dose < 0.0 {
        return Err(Error::Domain(format!("dose must be nonnegative, got {dose}")));
    }
    Ok(eval_full(&params.full(), dose))
}

/// Analytic limits `(f(0), f(inf))`.
pub fn asymptotes(family: ModelFamily, params: &CurveParams) -> Result<(f64, f64)> {
    check_family(family, params)?;
    Ok(asymptotes_full(&params.full()))
}

/// Dose at which the curve has moved a fraction `alpha` of the way from its
/// value at dose zero to its value at infinite dose.
pub fn conditional_ed(family: ModelFamily, params: &CurveParams, alpha: f64) -> Result<f64> {
    check_family(family, params)?;
    check_alpha(alpha)?;
    Ok(ed_full(&params.full(), alpha))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_family(family: ModelFamily, params: &CurveParams) -> Result<()> {
    if params.family != family {
        return Err(Error::InvalidParameter(format!(
            "parameters belong to {}, not {family}",
            params.family
        )));
    }
    Ok(())
}

/// Step used by every central-difference derivative in the crate.
#[inline]
pub(crate) fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central-difference gradient of the curve with respect to the family's
/// free parameters.
pub fn gradient_params(family: ModelFamily, params: &CurveParams, dose: f64) -> Result<Vec<f64>> {
    check_family(family, params)?;
    let full = params.full();
    let mut grad = Vec::with_capacity(family.parameter_count());
    for &p in family.params() {
        let k = p.index();
        let h = fd_step(full[k]);
        let mut hi = full;
        let mut lo = full;
        hi[k] += h;
        lo[k] -= h;
        let g = if p.is_positive() && lo[k] <= 0.0 {
            (eval_full(&hi, dose) - eval_full(&full, dose)) / h
        } else {
            (eval_full(&hi, dose) - eval_full(&lo, dose)) / (2.0 * h)
        };
        grad.push(g);
    }
    Ok(grad)
}

/// Heuristic starting values from raw dose-response data.
pub fn self_start(family: ModelFamily, doses: &[f64], responses: &[f64]) -> Result<CurveParams> {
    if doses.len() != responses.len() {
        return Err(Error::DegenerateData("dose and response lengths differ".into()));
    }
    if doses.iter().chain(responses).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite dose or response".into()));
    }
    let groups = dose_group_means(doses, responses);
    let q = family.parameter_count();
    if groups.len() < q {
        return Err(Error::DegenerateData(format!(
            "{family} needs at least {q} distinct doses, found {}",
            groups.len()
        )));
    }
    let (min_y, max_y) = responses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    if max_y - min_y <= 0.0 {
        return Err(Error::DegenerateData("all responses are equal".into()));
    }

    let (lo_mean, hi_mean) = groups
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, m)| (lo.min(m), hi.max(m)));
    let c0 = if family.position(Param::C).is_some() { lo_mean } else { 0.0 };
    let d0 = hi_mean;
    if d0 - c0 <= 0.0 {
        return Err(Error::DegenerateData(
            "upper asymptote start does not exceed the lower asymptote".into(),
        ));
    }

    let pts: Vec<(f64, f64)> = groups
        .iter()
        .filter(|(x, _)| *x > 0.0)
        .map(|&(x, m)| {
            let p = ((m - c0) / (d0 - c0)).clamp(0.01, 0.99);
            (x.ln(), (p / (1.0 - p)).ln())
        })
        .collect();

    let min_pos = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_pos = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut b0, mut log_e0) = (1.0, 0.5 * (min_pos + max_pos));
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        // logit p = -b (ln x - ln e)
        if slope.is_finite() && slope.abs() > 1e-3 {
            b0 = -slope;
            log_e0 = intercept / b0;
        }
    }
    if !log_e0.is_finite() {
        log_e0 = 0.5 * (min_pos + max_pos);
    }
    if min_pos.is_finite() {
        log_e0 = log_e0.clamp(min_pos - 100f64.ln(), max_pos + 100f64.ln());
    }
    let full = [b0, c0, d0, log_e0.exp(), 1.0];
    CurveParams::from_full(family, &full)
}

/// `(dose, mean response)` per distinct dose, sorted by dose.
fn dose_group_means(doses: &[f64], responses: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = doses.iter().copied().zip(responses.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for (x, y) in pairs {
        match out.last_mut() {
            Some(last) if last.0 == x => {
                last.1 += y;
                last.2 += 1;
            }
            _ => out.push((x, y, 1)),
        }
    }
    out.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
}
