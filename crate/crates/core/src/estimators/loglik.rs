//! Stand-alone Gaussian log-likelihood evaluators.
//!
//! These recompute likelihoods from stored parameter values and are used to
//! cross-check what the optimizers report.

use nalgebra::{DMatrix, DVector};

use super::{FixedEffectsSpec, FixedLayout, Prepared};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelFamily;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Independent-errors log-likelihood with residual standard deviation `sigma`.
pub fn iid_loglik(
    ds: &Dataset,
    family: ModelFamily,
    fixed_spec: &FixedEffectsSpec,
    beta: &[f64],
    sigma: f64,
) -> Result<f64> {
    let prep = Prepared::new(ds);
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    check_len(&layout, beta)?;
    iid_loglik_prepared(&prep, &layout, beta, sigma)
        .ok_or_else(|| Error::Evaluation("parameters outside the model domain".into()))
}

pub(crate) fn iid_loglik_prepared(prep: &Prepared, layout: &FixedLayout, beta: &[f64], sigma: f64) -> Option<f64> {
    let r = prep.residuals(layout, beta)?;
    let n = r.len() as f64;
    let rss: f64 = r.iter().map(|v| v * v).sum();
    Some(-0.5 * (n * (LN_2PI + 2.0 * sigma.ln()) + rss / (sigma * sigma)))
}

/// Compound-symmetry log-likelihood, evaluated by a dense Cholesky
/// factorization of each cluster's covariance matrix.
pub fn cs_loglik(
    ds: &Dataset,
    family: ModelFamily,
    fixed_spec: &FixedEffectsSpec,
    beta: &[f64],
    sigma: f64,
    rho: f64,
) -> Result<f64> {
    let prep = Prepared::new(ds);
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    check_len(&layout, beta)?;
    let r = prep
        .residuals(&layout, beta)
        .ok_or_else(|| Error::Evaluation("parameters outside the model domain".into()))?;
    let mut total = 0.0;
    for (name, idx) in &prep.clusters {
        let n = idx.len();
        let cov = DMatrix::from_fn(n, n, |i, j| sigma * sigma * if i == j { 1.0 } else { rho });
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Domain(format!("covariance of cluster `{name}` is not positive definite")))?;
        let ri = DVector::from_iterator(n, idx.iter().map(|&i| r[i]));
        let z = chol.l().solve_lower_triangular(&ri).expect("Cholesky factor is invertible");
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        total += -0.5 * (n as f64 * LN_2PI + logdet + z.norm_squared());
    }
    Ok(total)
}

fn check_len(layout: &FixedLayout, beta: &[f64]) -> Result<()> {
    if beta.len() != layout.len() {
        return Err(Error::InvalidParameter(format!("expected {} fixed effects, got {}", layout.len(), beta.len())));
    }
    Ok(())
}
