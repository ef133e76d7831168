use std::cell::RefCell;

use super::nls::{least_squares, residual_vcov, start_beta};
use super::{Estimator, FitResult, FixedEffectsSpec, FixedLayout, Prepared};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelFamily;
use crate::optim::{brent_minimize, levenberg_marquardt, LmOptions, LmOutcome};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Search range of the unconstrained correlation coordinate.
const T_RANGE: f64 = 8.0;

/// Generalized nonlinear least squares with compound-symmetry correlation
/// `sigma^2 [(1 - rho) I + rho J]` within each cluster.
///
/// The correlation is profiled: for each trial `rho` the fixed effects are
/// re-estimated by Levenberg-Marquardt on whitened residuals and `sigma^2`
/// takes its closed-form maximizer.
pub fn fit_gnls(ds: &Dataset, family: ModelFamily, fixed_spec: &FixedEffectsSpec) -> Result<FitResult> {
    let prep = Prepared::new(ds);
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    let max_n = prep.clusters.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    if max_n < 2 {
        return Err(Error::DegenerateData("compound symmetry needs a cluster with at least two observations".into()));
    }
    let cs = CompoundSymmetry::new(&prep, max_n);
    let beta0 = start_beta(&prep, &layout)?;
    let start = least_squares(&prep, &layout, &beta0)?;

    let warm = RefCell::new(start.x.clone());
    let mut profile = |t: f64| -> f64 {
        let rho = cs.rho_of(t);
        let theta0 = warm.borrow().clone();
        match cs.fit_at(&prep, &layout, rho, &theta0) {
            Ok(out) => {
                let ll = cs.profile_loglik(out.rss, rho);
                *warm.borrow_mut() = out.x;
                -ll
            }
            Err(_) => f64::INFINITY,
        }
    };
    let (t_hat, _) = brent_minimize(&mut profile, -T_RANGE, T_RANGE, 1e-8);
    let rho = cs.rho_of(t_hat);
    let out = cs.fit_at(&prep, &layout, rho, &warm.borrow())?;

    let n = prep.n() as f64;
    let sigma2 = out.rss / n;
    let beta = layout.to_natural(&out.x);
    let vcov_internal = residual_vcov(&out.jacobian, sigma2)?;
    let vcov = layout.natural_vcov(&beta, &vcov_internal);
    let ll = cs.profile_loglik(out.rss, rho);
    Ok(FitResult {
        estimator: Estimator::GNLS,
        family,
        fixed_spec: fixed_spec.clone(),
        random_spec: None,
        beta_hat: beta,
        vcov_beta: super::matrix_to_rows(&vcov),
        omega_hat: None,
        sigma_hat: sigma2.sqrt(),
        rho_hat: Some(rho),
        loglik: ll,
        converged: out.converged && start.converged,
        iterations: start.iterations + out.iterations,
        beta_names: layout.names.clone(),
        curves: prep.curves.clone(),
        eblups: None,
        cluster_curves: prep.cluster_curves(),
        rho_at_boundary: (T_RANGE - t_hat.abs()) < 0.5,
    })
}

/// Profiled compound-symmetry likelihood at a fixed correlation, reported
/// for the given `beta` (natural scale).
#[cfg(test)]
pub(crate) fn profile_loglik_at(prep: &Prepared, layout: &FixedLayout, beta: &[f64], rho: f64) -> Option<f64> {
    let max_n = prep.clusters.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let cs = CompoundSymmetry::new(prep, max_n);
    let r = cs.whitened(prep, layout, beta, rho)?;
    Some(cs.profile_loglik(r.iter().map(|v| v * v).sum(), rho))
}

struct CompoundSymmetry {
    rho_min: f64,
    sizes: Vec<usize>,
}

impl CompoundSymmetry {
    fn new(prep: &Prepared, max_n: usize) -> Self {
        let rho_min = if max_n > 1 { -1.0 / (max_n - 1) as f64 } else { -1.0 };
        CompoundSymmetry { rho_min, sizes: prep.clusters.iter().map(|(_, v)| v.len()).collect() }
    }

    /// Map `t` in R onto `(rho_min, 1)`.
    fn rho_of(&self, t: f64) -> f64 {
        self.rho_min + (1.0 - self.rho_min) * 0.5 * (1.0 + t.tanh())
    }

    /// Residuals premultiplied by `[(1 - rho) I + rho J]^{-1/2}` per cluster.
    fn whitened(&self, prep: &Prepared, layout: &FixedLayout, beta: &[f64], rho: f64) -> Option<Vec<f64>> {
        let r = prep.residuals(layout, beta)?;
        let mut out = vec![0.0; r.len()];
        let scale = (1.0 - rho).sqrt().recip();
        let mut pos = 0;
        for (_, idx) in &prep.clusters {
            let n = idx.len() as f64;
            let gamma = 1.0 - ((1.0 - rho) / (1.0 + (n - 1.0) * rho)).sqrt();
            let mean = idx.iter().map(|&i| r[i]).sum::<f64>() / n;
            for &i in idx {
                out[pos] = scale * (r[i] - gamma * mean);
                pos += 1;
            }
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }

    fn fit_at(&self, prep: &Prepared, layout: &FixedLayout, rho: f64, theta0: &[f64]) -> Result<LmOutcome> {
        levenberg_marquardt(
            |theta| self.whitened(prep, layout, &layout.to_natural(theta), rho),
            theta0,
            LmOptions::default(),
        )
    }

    fn log_det(&self, rho: f64) -> f64 {
        self.sizes
            .iter()
            .map(|&n| {
                let n = n as f64;
                (n - 1.0) * (1.0 - rho).ln() + (1.0 + (n - 1.0) * rho).ln()
            })
            .sum()
    }

    fn profile_loglik(&self, rss_whitened: f64, rho: f64) -> f64 {
        let n: f64 = self.sizes.iter().sum::<usize>() as f64;
        let sigma2 = rss_whitened / n;
        -0.5 * (n * (LN_2PI + sigma2.ln() + 1.0) + self.log_det(rho))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::estimators::loglik::{cs_loglik, iid_loglik};
    use crate::models::eval_full;

    fn clustered(m: usize, cluster_shift: f64) -> Dataset {
        let truth = [2.0, 0.0, 100.0, 1.0, 1.0];
        let doses: Vec<f64> = (0..8).map(|j| 0.05 * 2f64.powi(j)).collect();
        let mut obs = Vec::new();
        for c in 0..m {
            let shift = cluster_shift * ((c as f64 * 2.3).sin());
            for (j, &x) in doses.iter().enumerate() {
                let noise = 3.0 * ((c * 31 + j * 7) as f64).sin();
                obs.push(Observation { dose: x, response: eval_full(&truth, x) + shift + noise, cluster_id: format!("c{c:02}"), curve_id: "1".into() });
            }
        }
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn reported_loglik_matches_dense_evaluator() {
        let ds = clustered(8, 10.0);
        let fam = ModelFamily::LL4;
        let spec = FixedEffectsSpec::all_shared(fam);
        let fit = fit_gnls(&ds, fam, &spec).unwrap();
        let rho = fit.rho_hat.unwrap();
        assert!(rho > 0.3, "rho = {rho}");
        let dense = cs_loglik(&ds, fam, &spec, &fit.beta_hat, fit.sigma_hat, rho).unwrap();
        assert!((dense - fit.loglik).abs() < 1e-8 * fit.loglik.abs().max(1.0), "{dense} vs {}", fit.loglik);
        let v = fit.vcov_matrix();
        assert!((&v - v.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn zero_correlation_reduces_to_iid() {
        let ds = clustered(5, 0.0);
        let fam = ModelFamily::LL4;
        let spec = FixedEffectsSpec::all_shared(fam);
        let beta = [2.1, 0.5, 99.0, 1.1];
        let sigma = 2.7;
        let a = cs_loglik(&ds, fam, &spec, &beta, sigma, 0.0).unwrap();
        let b = iid_loglik(&ds, fam, &spec, &beta, sigma).unwrap();
        assert!((a - b).abs() < 1e-9 * b.abs());

        let prep = Prepared::new(&ds);
        let layout = FixedLayout::new(fam, &spec, &prep.curves).unwrap();
        let prof = profile_loglik_at(&prep, &layout, &beta, 0.0).unwrap();
        let r = prep.residuals(&layout, &beta).unwrap();
        let s_ml = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        let iid = iid_loglik(&ds, fam, &spec, &beta, s_ml).unwrap();
        assert!((prof - iid).abs() < 1e-9 * iid.abs());
    }

    #[test]
    fn needs_replicated_cluster() {
        let obs = (0..6)
            .map(|j| Observation { dose: 0.1 * (j + 1) as f64, response: j as f64, cluster_id: format!("{j}"), curve_id: "1".into() })
            .collect();
        let ds = Dataset::new(obs).unwrap();
        assert!(fit_gnls(&ds, ModelFamily::LL3, &FixedEffectsSpec::all_shared(ModelFamily::LL3)).is_err());
    }
}
