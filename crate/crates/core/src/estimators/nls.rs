use nalgebra::DMatrix;

use super::{loglik, Estimator, FitResult, FixedEffectsSpec, FixedLayout, Prepared};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelFamily};
use crate::optim::{levenberg_marquardt, scaled_condition, spd_inverse, LmOptions, LmOutcome};

/// Ordinary nonlinear least squares, ignoring the cluster structure.
pub fn fit_nls(ds: &Dataset, family: ModelFamily, fixed_spec: &FixedEffectsSpec) -> Result<FitResult> {
    let prep = Prepared::new(ds);
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    let beta0 = start_beta(&prep, &layout)?;
    let out = least_squares(&prep, &layout, &beta0)?;
    let beta = layout.to_natural(&out.x);
    let n = prep.n();
    let p = layout.len();
    if n <= p {
        return Err(Error::DegenerateData(format!("{n} observations leave no residual degrees of freedom for {p} parameters")));
    }
    let sigma2 = out.rss / (n - p) as f64;
    let vcov_internal = residual_vcov(&out.jacobian, sigma2)?;
    let vcov = layout.natural_vcov(&beta, &vcov_internal);
    let sigma = sigma2.sqrt();
    let ll = loglik::iid_loglik_prepared(&prep, &layout, &beta, sigma)
        .ok_or_else(|| Error::Evaluation("log-likelihood undefined at the optimum".into()))?;
    Ok(FitResult {
        estimator: Estimator::NLS,
        family,
        fixed_spec: fixed_spec.clone(),
        random_spec: None,
        beta_hat: beta,
        vcov_beta: super::matrix_to_rows(&vcov),
        omega_hat: None,
        sigma_hat: sigma,
        rho_hat: None,
        loglik: ll,
        converged: out.converged,
        iterations: out.iterations,
        beta_names: layout.names.clone(),
        curves: prep.curves.clone(),
        eblups: None,
        cluster_curves: prep.cluster_curves(),
        rho_at_boundary: false,
    })
}

/// Levenberg-Marquardt on raw residuals from natural-scale `beta0`; the
/// outcome's `x` is on the internal scale.
pub(crate) fn least_squares(prep: &Prepared, layout: &FixedLayout, beta0: &[f64]) -> Result<LmOutcome> {
    let theta0 = layout.to_internal(beta0);
    levenberg_marquardt(|theta| prep.residuals(layout, &layout.to_natural(theta)), &theta0, LmOptions::default())
}

/// `sigma2 * (J^T J)^-1`, rejecting numerically singular Jacobians.
pub(crate) fn residual_vcov(jac: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    if scaled_condition(jac) < 1e-10 {
        return Err(Error::RankDeficient("Jacobian is singular at the optimum".into()));
    }
    let inv = spd_inverse(&jac.tr_mul(jac))
        .ok_or_else(|| Error::RankDeficient("J^T J is not positive definite".into()))?;
    Ok(inv * sigma2)
}

/// Starting values from per-curve self-start heuristics. Shared parameters
/// take the mean over curves (geometric mean for positive parameters).
pub(crate) fn start_beta(prep: &Prepared, layout: &FixedLayout) -> Result<Vec<f64>> {
    let family = layout.family;
    let mut per_curve = Vec::with_capacity(prep.curves.len());
    for k in 0..prep.curves.len() {
        let idx: Vec<usize> = (0..prep.n()).filter(|&i| prep.curve[i] == k).collect();
        let x: Vec<f64> = idx.iter().map(|&i| prep.dose[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| prep.y[i]).collect();
        let cp = models::self_start(family, &x, &y)
            .map_err(|e| Error::DegenerateData(format!("curve `{}`: {e}", prep.curves[k])))?;
        per_curve.push(cp.full());
    }
    let mut sums = vec![0.0; layout.len()];
    let mut counts = vec![0usize; layout.len()];
    for (k, full) in per_curve.iter().enumerate() {
        for &p in family.params() {
            let s = layout.slot(p, k).expect("free parameter has a slot");
            let v = full[p.index()];
            sums[s] += if p.is_positive() { v.ln() } else { v };
            counts[s] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .zip(&layout.params)
        .map(|((s, &c), p)| {
            let m = s / c as f64;
            if p.is_positive() { m.exp() } else { m }
        })
        .collect())
}
