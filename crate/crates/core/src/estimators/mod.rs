//! Fitting back-ends sharing one model specification and one result type.
//!
//! * [`fit_nls`]: least squares ignoring the clustering.
//! * [`fit_gnls`]: Gaussian likelihood with compound-symmetry correlation
//!   within clusters.
//! * [`fit_nlme`]: random effects on chosen curve parameters, Laplace
//!   approximation to the marginal likelihood.

mod gnls;
pub mod loglik;
mod nlme;
mod nls;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{validate_full, CurveParams, ModelFamily, Param};

pub use gnls::fit_gnls;
pub use nlme::{fit_nlme, fit_nlme_with, marginal_loglik, NlmeOptions};
pub use nls::fit_nls;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sharing {
    #[serde(rename = "shared_across_curves")]
    Shared,
    #[serde(rename = "separate_per_curve")]
    Separate,
}

/// How each curve parameter is shared between curves (treatment groups).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedEffectsSpec {
    pub sharing: BTreeMap<Param, Sharing>,
}

impl FixedEffectsSpec {
    pub fn all_shared(family: ModelFamily) -> Self {
        Self::with_separate(family, &[])
    }

    pub fn all_separate(family: ModelFamily) -> Self {
        Self::with_separate(family, family.params())
    }

    pub fn with_separate(family: ModelFamily, separate: &[Param]) -> Self {
        let sharing = family
            .params()
            .iter()
            .map(|&p| (p, if separate.contains(&p) { Sharing::Separate } else { Sharing::Shared }))
            .collect();
        FixedEffectsSpec { sharing }
    }

    pub fn sharing_of(&self, p: Param) -> Sharing {
        self.sharing.get(&p).copied().unwrap_or(Sharing::Shared)
    }

    fn validate(&self, family: ModelFamily) -> Result<()> {
        for p in self.sharing.keys() {
            if family.position(*p).is_none() {
                return Err(Error::InvalidParameter(format!("{family} has no free parameter `{p}`")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceStructure {
    Diagonal,
    Unstructured,
}

impl FromStr for CovarianceStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diag" | "diagonal" => Ok(CovarianceStructure::Diagonal),
            "un" | "unstructured" => Ok(CovarianceStructure::Unstructured),
            other => Err(Error::Config(format!("unknown covariance structure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomEffectsSpec {
    pub random_parameters: Vec<Param>,
    pub covariance_structure: CovarianceStructure,
}

impl RandomEffectsSpec {
    pub fn new(random_parameters: Vec<Param>, covariance_structure: CovarianceStructure) -> Self {
        RandomEffectsSpec { random_parameters, covariance_structure }
    }

    pub fn dim(&self) -> usize {
        self.random_parameters.len()
    }

    fn validate(&self, family: ModelFamily) -> Result<()> {
        if self.random_parameters.is_empty() {
            return Err(Error::InvalidParameter("random effects list is empty".into()));
        }
        for (i, p) in self.random_parameters.iter().enumerate() {
            if family.position(*p).is_none() {
                return Err(Error::InvalidParameter(format!("{family} has no free parameter `{p}`")));
            }
            if self.random_parameters[..i].contains(p) {
                return Err(Error::InvalidParameter(format!("random parameter `{p}` listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    NLS,
    GNLS,
    NLME,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Estimator::NLS => "nls",
            Estimator::GNLS => "gnls",
            Estimator::NLME => "nlme",
        };
        f.write_str(s)
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nls" => Ok(Estimator::NLS),
            "gnls" => Ok(Estimator::GNLS),
            "nlme" => Ok(Estimator::NLME),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Outcome of any of the three estimators. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: Estimator,
    pub family: ModelFamily,
    pub fixed_spec: FixedEffectsSpec,
    pub random_spec: Option<RandomEffectsSpec>,
    pub beta_hat: Vec<f64>,
    pub vcov_beta: Vec<Vec<f64>>,
    /// Lower Cholesky factor of the random-effects covariance.
    pub omega_hat: Option<Vec<Vec<f64>>>,
    pub sigma_hat: f64,
    pub rho_hat: Option<f64>,
    /// Zero for population models built from known parameters.
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Curve labels in the order used by `beta_hat`.
    pub curves: Vec<String>,
    #[serde(default)]
    pub beta_names: Vec<String>,
    /// Per-cluster random-effect modes, natural parameter scale.
    #[serde(default)]
    pub eblups: Option<BTreeMap<String, Vec<f64>>>,
    /// Curves observed in each cluster.
    #[serde(default)]
    pub cluster_curves: BTreeMap<String, Vec<String>>,
    /// Set when the correlation estimate sits on the edge of its range.
    #[serde(default)]
    pub rho_at_boundary: bool,
}

impl FitResult {
    /// Population model at known parameter values, with no estimation
    /// uncertainty attached. Used to marginalize a true parameter setting.
    pub fn population(
        family: ModelFamily,
        fixed_spec: FixedEffectsSpec,
        curves: Vec<String>,
        beta: Vec<f64>,
        random_spec: Option<RandomEffectsSpec>,
        covariance: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let omega_hat = match (&random_spec, covariance) {
            (Some(spec), Some(g)) => {
                if g.nrows() != spec.dim() || g.ncols() != spec.dim() {
                    return Err(Error::Domain("covariance dimension does not match random effects".into()));
                }
                Some(matrix_to_rows(&crate::quadrature::psd_cholesky(g)?))
            }
            (None, None) => None,
            _ => return Err(Error::InvalidParameter("random effects and covariance must be given together".into())),
        };
        let p = beta.len();
        let fit = FitResult {
            estimator: if random_spec.is_some() { Estimator::NLME } else { Estimator::NLS },
            family,
            fixed_spec,
            random_spec,
            beta_hat: beta,
            vcov_beta: vec![vec![0.0; p]; p],
            omega_hat,
            sigma_hat: 1.0,
            rho_hat: None,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            beta_names: Vec::new(),
            curves,
            eblups: None,
            cluster_curves: BTreeMap::new(),
            rho_at_boundary: false,
        };
        let layout = fit.layout()?;
        let fit = FitResult { beta_names: layout.names.clone(), ..fit };
        fit.validate()?;
        Ok(fit)
    }

    pub fn layout(&self) -> Result<FixedLayout> {
        FixedLayout::new(self.family, &self.fixed_spec, &self.curves)
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.vcov_beta)
    }

    pub fn omega_matrix(&self) -> Option<DMatrix<f64>> {
        self.omega_hat.as_ref().map(|o| rows_to_matrix(o))
    }

    /// `G = Omega Omega^T`.
    pub fn g_matrix(&self) -> Option<DMatrix<f64>> {
        self.omega_matrix().map(|o| &o * o.transpose())
    }

    /// Random-effect standard deviations.
    pub fn random_sds(&self) -> Option<Vec<f64>> {
        self.g_matrix().map(|g| g.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
    }

    /// Standard errors of `beta_hat`.
    pub fn std_errors(&self) -> Vec<f64> {
        self.vcov_beta.iter().enumerate().map(|(i, r)| r[i].max(0.0).sqrt()).collect()
    }

    pub fn curve_index(&self, curve_id: &str) -> Result<usize> {
        self.curves
            .iter()
            .position(|c| c == curve_id)
            .ok_or_else(|| Error::Lookup(format!("unknown curve `{curve_id}`")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and structurally validate a stored fit.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let fit: FitResult = serde_json::from_str(s)?;
        fit.validate()?;
        Ok(fit)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let fit: FitResult = serde_json::from_slice(bytes)?;
        fit.validate()?;
        Ok(fit)
    }

    /// Check internal consistency of dimensions and parameter domains.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidFit(m));
        if self.curves.is_empty() {
            return bad("no curves".into());
        }
        for (i, c) in self.curves.iter().enumerate() {
            if self.curves[..i].contains(c) {
                return bad(format!("duplicate curve `{c}`"));
            }
        }
        self.fixed_spec.validate(self.family).map_err(|e| Error::InvalidFit(e.to_string()))?;
        let layout = self.layout()?;
        let p = layout.len();
        if self.beta_hat.len() != p {
            return bad(format!("beta_hat has {} entries, layout needs {p}", self.beta_hat.len()));
        }
        if self.beta_hat.iter().any(|v| !v.is_finite()) {
            return bad("non-finite beta_hat".into());
        }
        if self.vcov_beta.len() != p || self.vcov_beta.iter().any(|r| r.len() != p) {
            return bad("vcov_beta has wrong shape".into());
        }
        if self.vcov_beta.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite vcov_beta".into());
        }
        for i in 0..p {
            if self.vcov_beta[i][i] < 0.0 {
                return bad("negative variance in vcov_beta".into());
            }
            for j in 0..i {
                let (a, b) = (self.vcov_beta[i][j], self.vcov_beta[j][i]);
                if (a - b).abs() > 1e-8 * (1.0 + a.abs().max(b.abs())) {
                    return bad("vcov_beta is not symmetric".into());
                }
            }
        }
        for k in 0..self.curves.len() {
            validate_full(&layout.curve_full(&self.beta_hat, k))
                .map_err(|e| Error::InvalidFit(format!("curve `{}`: {e}", self.curves[k])))?;
        }
        if !(self.sigma_hat.is_finite() && self.sigma_hat >= 0.0) {
            return bad("sigma_hat must be finite and nonnegative".into());
        }
        if let Some(rho) = self.rho_hat {
            if !(rho.is_finite() && rho > -1.0 && rho < 1.0) {
                return bad("rho_hat must lie in (-1, 1)".into());
            }
        }
        match (&self.random_spec, &self.omega_hat) {
            (Some(spec), Some(omega)) => {
                spec.validate(self.family).map_err(|e| Error::InvalidFit(e.to_string()))?;
                let q = spec.dim();
                if omega.len() != q || omega.iter().any(|r| r.len() != q) {
                    return bad("omega_hat has wrong shape".into());
                }
                for (i, row) in omega.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if !v.is_finite() || (j > i && *v != 0.0) {
                            return bad("omega_hat must be finite and lower triangular".into());
                        }
                    }
                }
                if let Some(eb) = &self.eblups {
                    if eb.values().any(|v| v.len() != q || v.iter().any(|x| !x.is_finite())) {
                        return bad("eblups have wrong dimension".into());
                    }
                }
            }
            (None, None) => {
                if self.eblups.is_some() {
                    return bad("eblups without random effects".into());
                }
            }
            _ => return bad("random_spec and omega_hat must be present together".into()),
        }
        for curves in self.cluster_curves.values() {
            if let Some(c) = curves.iter().find(|c| !self.curves.contains(c)) {
                return bad(format!("cluster refers to unknown curve `{c}`"));
            }
        }
        Ok(())
    }
}

/// Conditional curve parameters (random effects at zero) for one curve.
pub fn curve_params(fit: &FitResult, curve_id: &str) -> Result<CurveParams> {
    let k = fit.curve_index(curve_id)?;
    let layout = fit.layout()?;
    CurveParams::from_full(fit.family, &layout.curve_full(&fit.beta_hat, k))
}

/// Position of each fixed effect within `beta` given the sharing map.
#[derive(Debug, Clone)]
pub struct FixedLayout {
    pub family: ModelFamily,
    /// `slots[param_index][curve]` is the position in `beta`, for free params.
    slots: [Option<Vec<usize>>; 5],
    pub names: Vec<String>,
    /// Parameter that each `beta` entry belongs to.
    pub params: Vec<Param>,
    pub n_curves: usize,
}

impl FixedLayout {
    pub fn new(family: ModelFamily, spec: &FixedEffectsSpec, curves: &[String]) -> Result<Self> {
        spec.validate(family)?;
        let n_curves = curves.len();
        let mut slots: [Option<Vec<usize>>; 5] = Default::default();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for &p in family.params() {
            let idx = match spec.sharing_of(p) {
                Sharing::Shared => {
                    names.push(p.name().to_string());
                    params.push(p);
                    vec![names.len() - 1; n_curves]
                }
                Sharing::Separate => curves
                    .iter()
                    .map(|c| {
                        names.push(format!("{}:{c}", p.name()));
                        params.push(p);
                        names.len() - 1
                    })
                    .collect(),
            };
            slots[p.index()] = Some(idx);
        }
        Ok(FixedLayout { family, slots, names, params, n_curves })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Position of parameter `p` for curve `k` in `beta`.
    pub fn slot(&self, p: Param, k: usize) -> Option<usize> {
        self.slots[p.index()].as_ref().map(|v| v[k])
    }

    /// Full `(b, c, d, e, f)` vector of curve `k`.
    pub fn curve_full(&self, beta: &[f64], k: usize) -> [f64; 5] {
        let mut vals = [0.0; 5];
        for &p in self.family.params() {
            vals[self.family.position(p).unwrap_or(0)] = beta[self.slot(p, k).unwrap_or(0)];
        }
        self.family.expand(&vals[..self.family.parameter_count()])
    }

    /// Map natural-scale `beta` to the optimizer's scale (log for `e`, `f`).
    pub fn to_internal(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.params).map(|(v, p)| if p.is_positive() { v.ln() } else { *v }).collect()
    }

    pub fn to_natural(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.params).map(|(v, p)| if p.is_positive() { v.exp() } else { *v }).collect()
    }

    /// Derivative of natural-scale parameters with respect to internal ones.
    pub fn jacobian_diag(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.params).map(|(v, p)| if p.is_positive() { *v } else { 1.0 }).collect()
    }

    /// Transform an internal-scale covariance to the natural scale.
    pub fn natural_vcov(&self, beta: &[f64], vcov_internal: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.jacobian_diag(beta);
        let p = d.len();
        let mut out = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                out[(i, j)] = d[i] * vcov_internal[(i, j)] * d[j];
            }
        }
        (&out + out.transpose()) * 0.5
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Observation arrays in the form the estimators consume.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub dose: Vec<f64>,
    pub y: Vec<f64>,
    pub curve: Vec<usize>,
    pub clusters: Vec<(String, Vec<usize>)>,
    pub curves: Vec<String>,
}

impl Prepared {
    pub fn new(ds: &Dataset) -> Self {
        let curves = ds.curves();
        let curve_pos: BTreeMap<&str, usize> = curves.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let obs = ds.observations();
        Prepared {
            dose: obs.iter().map(|o| o.dose).collect(),
            y: obs.iter().map(|o| o.response).collect(),
            curve: obs.iter().map(|o| curve_pos[o.curve_id.as_str()]).collect(),
            clusters: ds.cluster_index().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            curves,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn cluster_curves(&self) -> BTreeMap<String, Vec<String>> {
        self.clusters
            .iter()
            .map(|(name, idx)| {
                let mut ks: Vec<usize> = idx.iter().map(|&i| self.curve[i]).collect();
                ks.sort_unstable();
                ks.dedup();
                (name.clone(), ks.into_iter().map(|k| self.curves[k].clone()).collect())
            })
            .collect()
    }

    /// Full parameter vectors per curve for natural-scale `beta`, or `None`
    /// if any curve leaves the model domain.
    pub fn curve_fulls(&self, layout: &FixedLayout, beta: &[f64]) -> Option<Vec<[f64; 5]>> {
        (0..self.curves.len())
            .map(|k| {
                let full = layout.curve_full(beta, k);
                validate_full(&full).ok().map(|_| full)
            })
            .collect()
    }

    /// Raw residuals `y - f` at natural-scale `beta`.
    pub fn residuals(&self, layout: &FixedLayout, beta: &[f64]) -> Option<Vec<f64>> {
        let fulls = self.curve_fulls(layout, beta)?;
        let r: Vec<f64> = (0..self.n())
            .map(|i| self.y[i] - crate::models::eval_full(&fulls[self.curve[i]], self.dose[i]))
            .collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_assembles_two_treatments() {
        let curves = vec!["bentazon".to_string(), "diuron".to_string()];
        let spec = FixedEffectsSpec::all_separate(ModelFamily::LL4);
        let layout = FixedLayout::new(ModelFamily::LL4, &spec, &curves).unwrap();
        assert_eq!(layout.len(), 8);
        let beta: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        assert_eq!(layout.curve_full(&beta, 0), [1.0, 3.0, 5.0, 7.0, 1.0]);
        assert_eq!(layout.curve_full(&beta, 1), [2.0, 4.0, 6.0, 8.0, 1.0]);

        let shared = FixedLayout::new(ModelFamily::LL4, &FixedEffectsSpec::all_shared(ModelFamily::LL4), &curves).unwrap();
        assert_eq!(shared.len(), 4);
        assert_eq!(shared.curve_full(&[1.0, 2.0, 3.0, 4.0], 0), shared.curve_full(&[1.0, 2.0, 3.0, 4.0], 1));
    }

    #[test]
    fn curve_params_lookup() {
        let fit = FitResult::population(
            ModelFamily::LL3,
            FixedEffectsSpec::all_shared(ModelFamily::LL3),
            vec!["1".into()],
            vec![5.0, 2000.0, 0.5],
            None,
            None,
        )
        .unwrap();
        let cp = curve_params(&fit, "1").unwrap();
        assert_eq!(cp.values(), &[5.0, 2000.0, 0.5]);
        assert!(matches!(curve_params(&fit, "2"), Err(Error::Lookup(_))));
    }

    #[test]
    fn json_rejects_inconsistent_documents() {
        let fit = FitResult::population(
            ModelFamily::LL4,
            FixedEffectsSpec::all_shared(ModelFamily::LL4),
            vec!["1".into()],
            vec![1.0, 0.0, 1.0, 1.0],
            None,
            None,
        )
        .unwrap();
        let json = fit.to_json().unwrap();
        assert_eq!(FitResult::from_json_str(&json).unwrap(), fit);

        let mut bad = fit.clone();
        bad.beta_hat.pop();
        assert!(FitResult::from_json_str(&serde_json::to_string(&bad).unwrap()).is_err());
        let mut bad = fit.clone();
        bad.beta_hat[3] = -1.0;
        assert!(FitResult::from_json_str(&serde_json::to_string(&bad).unwrap()).is_err());
        let mut bad = fit;
        bad.omega_hat = Some(vec![vec![1.0]]);
        assert!(FitResult::from_json_str(&serde_json::to_string(&bad).unwrap()).is_err());
    }
}
