//! Simulation study: scenario definition, data generation, Monte Carlo
//! ground truth and replicate fitting.

mod config;
mod study;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use config::parse_scenario;
pub use study::{run_study, summary_to_csv, Arm, CellSummary, ReplicateRecord, StudyConfig, StudyResult, StudySummary, SUMMARY_COLUMNS};

use crate::data::{Dataset, Observation, DEFAULT_CURVE};
use crate::error::{Error, Result};
use crate::marginal::Marginalizer;
use crate::models::{eval_full, ModelFamily, Param};
use crate::quadrature::psd_cholesky;
use crate::rng::normal_matrix;

/// Relative floor for simulated cluster-level `d` and `e`.
pub const CLUSTER_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Unstructured,
    Diagonal,
}

/// Unstructured correlation of `(b, d, e)` in the reference scenario.
pub const REFERENCE_CORRELATION: [[f64; 3]; 3] = [[1.0, -0.9, 0.8], [-0.9, 1.0, -0.5], [0.8, -0.5, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub family: ModelFamily,
    /// Fixed effects in the family's parameter order.
    pub fixed_effects: Vec<f64>,
    pub random_parameters: Vec<Param>,
    pub random_sd: Vec<f64>,
    pub correlation: Correlation,
    /// Correlation used when `correlation` is unstructured.
    pub correlation_matrix: Vec<Vec<f64>>,
    pub residual_sd: f64,
    pub doses: Vec<f64>,
    pub obs_per_dose: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            family: ModelFamily::LL3,
            fixed_effects: vec![5.0, 2000.0, 0.5],
            random_parameters: vec![Param::B, Param::D, Param::E],
            random_sd: vec![0.5, 500.0, 0.1],
            correlation: Correlation::Unstructured,
            correlation_matrix: REFERENCE_CORRELATION.iter().map(|r| r.to_vec()).collect(),
            residual_sd: 100.0,
            doses: log_spaced(0.01, 3.0, 10),
            obs_per_dose: 1,
        }
    }
}

/// `n` doses equally spaced on the log scale over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi.ln() - lo.ln()) / (n - 1) as f64;
            let mut grid: Vec<f64> = (0..n).map(|j| (lo.ln() + step * j as f64).exp()).collect();
            // endpoints exactly as given
            grid[0] = lo;
            grid[n - 1] = hi;
            grid
        }
    }
}

impl Scenario {
    pub fn with_correlation(mut self, correlation: Correlation) -> Self {
        self.correlation = correlation;
        self
    }

    /// Multiply the random-effect SD of `e` by `factor`.
    pub fn with_sigma_e_scale(mut self, factor: f64) -> Self {
        if let Some(i) = self.random_parameters.iter().position(|p| *p == Param::E) {
            if let Some(sd) = self.random_sd.get_mut(i) {
                *sd *= factor;
            }
        }
        self
    }

    pub fn full_fixed(&self) -> [f64; 5] {
        self.family.expand(&self.fixed_effects)
    }

    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let q = self.random_parameters.len();
        match self.correlation {
            Correlation::Diagonal => DMatrix::identity(q, q),
            Correlation::Unstructured => DMatrix::from_fn(q, q, |i, j| self.correlation_matrix[i][j]),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let r = self.correlation_matrix();
        let sd = &self.random_sd;
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| sd[i] * sd[j] * r[(i, j)])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fixed_effects.len() != self.family.parameter_count() {
            return bad(format!("{} needs {} fixed effects, got {}", self.family, self.family.parameter_count(), self.fixed_effects.len()));
        }
        crate::models::CurveParams::new(self.family, self.fixed_effects.clone())
            .map_err(|e| Error::Config(format!("fixed effects: {e}")))?;
        let q = self.random_parameters.len();
        if q == 0 {
            return bad("at least one random parameter is required".into());
        }
        for p in &self.random_parameters {
            if self.family.position(*p).is_none() {
                return bad(format!("random parameter `{p}` is fixed in {}", self.family));
            }
        }
        let mut seen = self.random_parameters.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != q {
            return bad("random parameters repeat".into());
        }
        if self.random_sd.len() != q {
            return bad(format!("{q} random parameters but {} standard deviations", self.random_sd.len()));
        }
        if self.random_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("random-effect standard deviations must be finite and nonnegative".into());
        }
        if self.correlation == Correlation::Unstructured {
            let r = &self.correlation_matrix;
            if r.len() != q || r.iter().any(|row| row.len() != q) {
                return bad(format!("correlation matrix must be {q}x{q}"));
            }
            for (i, row) in r.iter().enumerate() {
                if (row[i] - 1.0).abs() > 1e-12 {
                    return bad("correlation matrix needs a unit diagonal".into());
                }
                if row.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                    return bad("correlations must lie in [-1, 1]".into());
                }
            }
            psd_cholesky(&self.correlation_matrix()).map_err(|e| Error::Config(format!("correlation matrix: {e}")))?;
        }
        if !(self.residual_sd.is_finite() && self.residual_sd >= 0.0) {
            return bad("residual SD must be finite and nonnegative".into());
        }
        if self.doses.is_empty() || self.doses.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("doses must be a nonempty list of finite nonnegative values".into());
        }
        if self.obs_per_dose == 0 {
            return bad("obs_per_dose must be at least one".into());
        }
        Ok(())
    }
}

/// Simulated data with the number of clusters whose `d` or `e` hit the
/// positivity floor.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub clamped: usize,
    /// Cluster-level random effects as drawn, before flooring.
    pub effects: Vec<Vec<f64>>,
}

pub fn generate_dataset(scenario: &Scenario, m: usize, seed: u64) -> Result<Dataset> {
    Ok(generate_detailed(scenario, m, seed)?.dataset)
}

/// Cluster `i` draws its random effects from stream `2i` and its residuals
/// from stream `2i + 1`.
pub fn generate_detailed(scenario: &Scenario, m: usize, seed: u64) -> Result<Generated> {
    scenario.validate()?;
    if m < 2 {
        return Err(Error::Config(format!("need at least two clusters, got {m}")));
    }
    let q = scenario.random_parameters.len();
    let omega = psd_cholesky(&scenario.covariance())?;
    let base = scenario.full_fixed();
    let n_obs = scenario.doses.len() * scenario.obs_per_dose;
    let width = (m.max(10) - 1).to_string().len();

    let mut observations = Vec::with_capacity(m * n_obs);
    let mut effects = Vec::with_capacity(m);
    let mut clamped = 0;
    for i in 0..m {
        let stream = 2 * i as u64;
        let b = &omega * normal_matrix(seed, stream, q, 1);
        let mut full = base;
        for (r, p) in scenario.random_parameters.iter().enumerate() {
            full[p.index()] += b[r];
        }
        let mut hit = false;
        for p in [Param::D, Param::E] {
            let floor = CLUSTER_FLOOR * base[p.index()].abs();
            if full[p.index()] < floor && (p == Param::E || base[p.index()] > 0.0) {
                full[p.index()] = floor;
                hit = true;
            }
        }
        clamped += hit as usize;
        effects.push(b.iter().copied().collect());

        let noise = normal_matrix(seed, stream + 1, n_obs, 1);
        let id = format!("c{:0width$}", i + 1);
        let mut k = 0;
        for &x in &scenario.doses {
            for _ in 0..scenario.obs_per_dose {
                observations.push(Observation {
                    dose: x,
                    response: eval_full(&full, x) + scenario.residual_sd * noise[k],
                    cluster_id: id.clone(),
                    curve_id: DEFAULT_CURVE.to_string(),
                });
                k += 1;
            }
        }
    }
    Ok(Generated { dataset: Dataset::new(observations)?, clamped, effects })
}

/// Monte Carlo sample of the scenario's cluster curves, floored the same
/// way as [`generate_dataset`].
pub fn truth_marginalizer(scenario: &Scenario, n_samples: usize, seed: u64) -> Result<Marginalizer> {
    scenario.validate()?;
    let omega = psd_cholesky(&scenario.covariance())?;
    let mc = Marginalizer::monte_carlo(scenario.full_fixed(), &scenario.random_parameters, &omega, n_samples, seed, 0)?;
    Ok(mc.with_relative_floors(&[(Param::D, CLUSTER_FLOOR), (Param::E, CLUSTER_FLOOR)]))
}

/// Effective dose of the population-average curve, by Monte Carlo with
/// common random numbers across the root search.
pub fn mc_true_ed(scenario: &Scenario, alpha: f64, n_samples: usize, seed: u64) -> Result<f64> {
    Ok(mc_true_ed_detailed(scenario, alpha, n_samples, seed)?.0)
}

/// Monte Carlo effective dose and its standard error.
pub fn mc_true_ed_detailed(scenario: &Scenario, alpha: f64, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::Config(format!("ground truth needs at least 1000 samples, got {n_samples}")));
    }
    let mc = truth_marginalizer(scenario, n_samples, seed)?;
    let ed = mc.ed(alpha)?;
    Ok((ed, mc.ed_std_error(alpha, ed)))
}
