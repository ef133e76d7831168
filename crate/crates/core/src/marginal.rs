//! Population-average curves over the random-effects distribution, their
//! effective doses, and delta-method standard errors.
//!
//! A [`Marginalizer`] holds a weighted cloud of random-effect offsets (a
//! transformed Gauss-Hermite grid or a Monte Carlo sample) and averages the
//! curve over it.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{curve_params, FitResult};
use crate::models::{asymptotes_full, check_alpha, ed_full, eval_full, fd_step, Param};
use crate::quadrature::{build_grid, transform_nodes};
use crate::rng::normal_matrix;

/// Relative floor applied to `e` and `f` at nodes that would leave the
/// model domain.
pub const NODE_FLOOR: f64 = 1e-12;
/// Half-width, in decades, of the search for a bracketing interval.
pub const BRACKET_DECADES: i32 = 8;
const LOG10_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Conditional,
    Marginalized,
    Marginal,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Conditional => "conditional",
            Method::Marginalized => "marginalized",
            Method::Marginal => "marginal",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conditional" => Ok(Method::Conditional),
            "marginalized" | "marginalised" => Ok(Method::Marginalized),
            "marginal" => Ok(Method::Marginal),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Derivative with respect to `beta_hat`.
    pub gradient: Vec<f64>,
    pub method: Method,
}

/// Monte Carlo estimate of a population-average curve value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub mc_std_error: f64,
    pub seed: u64,
    pub stream: u64,
}

/// Population-average value with the number of offsets that had to be
/// pulled back into the model domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub clamped: usize,
}

/// Weighted random-effect offsets around a base curve.
#[derive(Debug, Clone)]
pub struct Marginalizer {
    base: [f64; 5],
    random: Vec<usize>,
    /// One row per offset, one column per random parameter.
    offsets: DMatrix<f64>,
    weights: Vec<f64>,
    /// `(parameter index, floor relative to the base value)`.
    floors: Vec<(usize, f64)>,
}

impl Marginalizer {
    pub fn new(base: [f64; 5], random: &[Param], offsets: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        if offsets.ncols() != random.len() || offsets.nrows() != weights.len() {
            return Err(Error::Domain("offsets, weights and random parameters disagree in size".into()));
        }
        if weights.is_empty() {
            return Err(Error::Domain("need at least one offset".into()));
        }
        Ok(Marginalizer {
            base,
            random: random.iter().map(|p| p.index()).collect(),
            offsets,
            weights,
            floors: vec![(Param::E.index(), NODE_FLOOR), (Param::F.index(), NODE_FLOOR)],
        })
    }

    /// Gauss-Hermite rule with `n` points per dimension mapped through the
    /// covariance with lower Cholesky factor `omega`.
    pub fn quadrature(base: [f64; 5], random: &[Param], omega: &DMatrix<f64>, n: usize) -> Result<Self> {
        let grid = build_grid(n, random.len())?;
        let g = omega * omega.transpose();
        let xi = transform_nodes(&grid, &g)?;
        Self::new(base, random, xi, grid.weights)
    }

    /// Equally weighted draws `omega z` with `z` from stream `stream`.
    pub fn monte_carlo(base: [f64; 5], random: &[Param], omega: &DMatrix<f64>, n_samples: usize, seed: u64, stream: u64) -> Result<Self> {
        if n_samples < 2 {
            return Err(Error::Domain("Monte Carlo integration needs at least two samples".into()));
        }
        let q = random.len();
        if omega.nrows() != q || omega.ncols() != q {
            return Err(Error::Domain("Cholesky factor does not match the random effects".into()));
        }
        let z = normal_matrix(seed, stream, q, n_samples);
        let offsets = (omega * z).transpose();
        Self::new(base, random, offsets, vec![1.0 / n_samples as f64; n_samples])
    }

    /// Quadrature marginalizer for one curve of an NLME fit.
    pub fn from_fit(fit: &FitResult, curve_id: &str, n: usize) -> Result<Self> {
        let (spec, omega) = random_parts(fit)?;
        let base = curve_params(fit, curve_id)?.full();
        Self::quadrature(base, &spec, &omega, n)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn base(&self) -> [f64; 5] {
        self.base
    }

    /// Same offsets around a different base curve.
    pub fn with_base(&self, base: [f64; 5]) -> Self {
        Marginalizer { base, ..self.clone() }
    }

    /// Replace the default `e`/`f` floors. `e` and `f` keep the default
    /// floor unless listed.
    pub fn with_relative_floors(mut self, floors: &[(Param, f64)]) -> Self {
        for &(p, v) in floors {
            let i = p.index();
            match self.floors.iter_mut().find(|(j, _)| *j == i) {
                Some(entry) => entry.1 = v,
                None => self.floors.push((i, v)),
            }
        }
        self
    }

    fn node(&self, k: usize) -> ([f64; 5], bool) {
        let mut p = self.base;
        for (r, &i) in self.random.iter().enumerate() {
            p[i] += self.offsets[(k, r)];
        }
        let mut clamped = false;
        for &(i, rel) in &self.floors {
            let floor = rel * self.base[i].abs();
            if p[i] < floor {
                p[i] = floor;
                clamped = true;
            }
        }
        (p, clamped)
    }

    fn average(&self, g: impl Fn(&[f64; 5]) -> f64) -> Prediction {
        let mut value = 0.0;
        let mut clamped = 0;
        for (k, w) in self.weights.iter().enumerate() {
            let (p, c) = self.node(k);
            value += w * g(&p);
            clamped += c as usize;
        }
        Prediction { value, clamped }
    }

    pub fn predict(&self, dose: f64) -> Prediction {
        self.average(|p| eval_full(p, dose))
    }

    /// Weighted averages of the per-offset limits at dose zero and infinity.
    pub fn asymptotes(&self) -> (f64, f64) {
        let lo = self.average(|p| asymptotes_full(p).0).value;
        let hi = self.average(|p| asymptotes_full(p).1).value;
        (lo, hi)
    }

    /// Standard error of the average of `g` treating the offsets as an
    /// equally weighted sample.
    fn sample_std_error(&self, g: impl Fn(&[f64; 5]) -> f64) -> f64 {
        let n = self.len() as f64;
        let vals: Vec<f64> = (0..self.len()).map(|k| g(&self.node(k).0)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (var / n).sqrt()
    }

    /// Monte Carlo standard error of [`Marginalizer::predict`].
    pub fn predict_std_error(&self, dose: f64) -> f64 {
        self.sample_std_error(|p| eval_full(p, dose))
    }

    /// Dose where the averaged curve covers a fraction `alpha` of the way
    /// between its averaged limits.
    pub fn ed(&self, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        let (lo, hi) = self.asymptotes();
        let span = hi - lo;
        if !span.is_finite() || span.abs() <= 1e-14 * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE) {
            return Err(Error::Domain("averaged curve has equal limits at dose zero and infinity".into()));
        }
        // increasing in t = log10(dose), from -alpha to 1 - alpha
        let h = |t: f64| (self.predict(10f64.powf(t)).value - lo) / span - alpha;

        let start = ed_full(&self.base, alpha).log10();
        let t0 = if start.is_finite() { start } else { self.base[Param::E.index()].log10() };
        let h0 = h(t0);
        if h0 == 0.0 {
            return Ok(10f64.powf(t0));
        }
        let dir = if h0 > 0.0 { -1.0 } else { 1.0 };
        let (mut a, mut ha) = (t0, h0);
        let mut bracket = None;
        for k in 1..=BRACKET_DECADES {
            let t = t0 + dir * k as f64;
            let ht = h(t);
            if ht.signum() != h0.signum() {
                bracket = Some((a, ha, t, ht));
                break;
            }
            a = t;
            ha = ht;
        }
        let (mut a, mut ha, mut b, mut hb) = bracket.ok_or_else(|| {
            Error::NoSolution(format!(
                "no effective dose for alpha = {alpha} within {BRACKET_DECADES} decades of {:.4e}",
                10f64.powf(t0)
            ))
        })?;
        while (b - a).abs() > LOG10_TOL {
            let m = 0.5 * (a + b);
            let hm = h(m);
            if hm == 0.0 {
                return Ok(10f64.powf(m));
            }
            if hm.signum() == ha.signum() {
                a = m;
                ha = hm;
            } else {
                b = m;
                hb = hm;
            }
        }
        let t = if hb != ha { a - ha * (b - a) / (hb - ha) } else { 0.5 * (a + b) };
        Ok(10f64.powf(t))
    }

    /// Monte Carlo standard error of [`Marginalizer::ed`] at its solution
    /// `ed`, by linearizing the defining equation in the dose.
    pub fn ed_std_error(&self, alpha: f64, ed: f64) -> f64 {
        let psi = |p: &[f64; 5]| {
            let (lo, hi) = asymptotes_full(p);
            eval_full(p, ed) - lo - alpha * (hi - lo)
        };
        let se = self.sample_std_error(psi);
        let h = fd_step(ed) * ed.clamp(1e-300, 1.0);
        let slope = (self.predict(ed + h).value - self.predict(ed - h).value) / (2.0 * h);
        se / slope.abs()
    }
}

/// Random-effects parameters and Cholesky factor of an NLME fit.
pub(crate) fn random_parts(fit: &FitResult) -> Result<(Vec<Param>, DMatrix<f64>)> {
    match (&fit.random_spec, fit.omega_matrix()) {
        (Some(spec), Some(omega)) => Ok((spec.random_parameters.clone(), omega)),
        _ => Err(Error::Method(format!(
            "{} fit has no random effects to average over; use conditional prediction",
            fit.estimator
        ))),
    }
}

/// Quadrature approximation of the population-average curve at `dose`.
pub fn marginal_predict(fit: &FitResult, curve_id: &str, dose: f64, n: usize) -> Result<f64> {
    Ok(marginal_predict_detailed(fit, curve_id, dose, n)?.value)
}

pub fn marginal_predict_detailed(fit: &FitResult, curve_id: &str, dose: f64, n: usize) -> Result<Prediction> {
    check_dose(dose)?;
    Ok(Marginalizer::from_fit(fit, curve_id, n)?.predict(dose))
}

/// Monte Carlo counterpart of [`marginal_predict`], drawing from stream 0
/// of `seed`.
pub fn mc_marginal_predict(fit: &FitResult, curve_id: &str, dose: f64, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_dose(dose)?;
    let (spec, omega) = random_parts(fit)?;
    let base = curve_params(fit, curve_id)?.full();
    let mc = Marginalizer::monte_carlo(base, &spec, &omega, n_samples, seed, 0)?;
    Ok(McEstimate { estimate: mc.predict(dose).value, mc_std_error: mc.predict_std_error(dose), seed, stream: 0 })
}

/// Effective dose of the population-average curve.
pub fn marginalized_ed(fit: &FitResult, curve_id: &str, alpha: f64, n: usize) -> Result<f64> {
    Marginalizer::from_fit(fit, curve_id, n)?.ed(alpha)
}

/// First-order standard error of `derived(beta)` at `beta_hat`, using a
/// central-difference gradient and `vcov_beta`. Variance components are
/// held fixed.
pub fn delta_method<F>(fit: &FitResult, derived: F, method: Method) -> Result<DerivedEstimate>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let beta = &fit.beta_hat;
    let layout = fit.layout()?;
    let value = finite(derived(beta), "at the estimate")?;
    let mut gradient = Vec::with_capacity(beta.len());
    for k in 0..beta.len() {
        let name = &layout.names[k];
        let h = fd_step(beta[k]);
        let mut up = beta.clone();
        up[k] += h;
        let f_up = finite(derived(&up), &format!("when perturbing `{name}` upward"))?;
        let mut down = beta.clone();
        down[k] -= h;
        let g = if layout.params[k].is_positive() && down[k] <= 0.0 {
            (f_up - value) / h
        } else {
            let f_down = finite(derived(&down), &format!("when perturbing `{name}` downward"))?;
            (f_up - f_down) / (2.0 * h)
        };
        gradient.push(g);
    }
    let v = fit.vcov_matrix();
    let g = nalgebra::DVector::from_column_slice(&gradient);
    let var = (g.transpose() * v * &g)[(0, 0)];
    Ok(DerivedEstimate { value, std_error: var.max(0.0).sqrt(), gradient, method })
}

fn finite(value: Result<f64>, context: &str) -> Result<f64> {
    match value {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(Error::Evaluation(format!("derived quantity is {v} {context}"))),
        Err(e) => Err(Error::Evaluation(format!("derived quantity failed {context}: {e}"))),
    }
}

fn check_dose(dose: f64) -> Result<()> {
    if dose.is_nan() || dose < 0.0 {
        return Err(Error::Domain(format!("dose must be nonnegative, got {dose}")));
    }
    Ok(())
}
