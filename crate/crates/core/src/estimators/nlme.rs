//! Nonlinear mixed-effects fitting by Laplace-approximate maximum likelihood.
//!
//! Each cluster carries random effects `b = L u` with `u ~ N(0, I)` and
//! `G = L L^T`. For fixed `(beta, L, sigma)` the per-cluster posterior mode
//! of `u` is found by damped Gauss-Newton steps; the integral over `u` is
//! then replaced by its Laplace approximation
//!
//! ```text
//! log p(y_i) ~ -n_i/2 log(2 pi sigma^2) - h(u^) - 1/2 log det(I + J^T J / sigma^2)
//! h(u) = |y_i - f(beta + L u)|^2 / (2 sigma^2) + |u|^2 / 2
//! ```
//!
//! The outer problem over `(beta, log-Cholesky(G), log sigma)` is solved by
//! BFGS. Working in `u` keeps the objective finite as a variance collapses
//! to zero.

use std::cell::RefCell;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::nls::{least_squares, start_beta};
use super::{
    matrix_to_rows, CovarianceStructure, Estimator, FitResult, FixedEffectsSpec, FixedLayout, Prepared,
    RandomEffectsSpec,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{eval_full, fd_step, ModelFamily, Param};
use crate::optim::{bfgs, hessian, spd_inverse, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy)]
pub struct NlmeOptions {
    pub max_outer: usize,
    pub outer_rel_gtol: f64,
    pub max_inner: usize,
    pub inner_tol: f64,
}

impl Default for NlmeOptions {
    fn default() -> Self {
        NlmeOptions { max_outer: 500, outer_rel_gtol: 1e-6, max_inner: 50, inner_tol: 1e-10 }
    }
}

pub fn fit_nlme(
    ds: &Dataset,
    family: ModelFamily,
    fixed_spec: &FixedEffectsSpec,
    random_spec: &RandomEffectsSpec,
) -> Result<FitResult> {
    fit_nlme_with(ds, family, fixed_spec, random_spec, NlmeOptions::default())
}

pub fn fit_nlme_with(
    ds: &Dataset,
    family: ModelFamily,
    fixed_spec: &FixedEffectsSpec,
    random_spec: &RandomEffectsSpec,
    opts: NlmeOptions,
) -> Result<FitResult> {
    random_spec.validate(family)?;
    let prep = Prepared::new(ds);
    if prep.clusters.len() < 2 {
        return Err(Error::DegenerateData("mixed-effects fitting needs at least two clusters".into()));
    }
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    let problem = Problem::new(&prep, &layout, random_spec, opts);

    let beta0 = start_beta(&prep, &layout)?;
    let nls = least_squares(&prep, &layout, &beta0)?;
    let beta_nls = layout.to_natural(&nls.x);
    let (sds, sigma0) = variance_start(&prep, &layout, random_spec, &beta_nls, nls.rss);

    let mut theta0 = nls.x.clone();
    theta0.extend(problem.chol_params(&DMatrix::from_diagonal(&DVector::from_vec(sds))));
    theta0.push(sigma0.ln());

    let outcome = bfgs(
        |t| problem.neg_loglik(t),
        &theta0,
        BfgsOptions { max_iter: opts.max_outer, rel_gtol: opts.outer_rel_gtol },
    );
    if !outcome.value.is_finite() {
        return Err(Error::Evaluation("marginal likelihood undefined at the starting values".into()));
    }
    let theta = outcome.x;
    let (beta, chol, sigma) = problem.unpack(&theta);

    let p = layout.len();
    let rest = theta[p..].to_vec();
    let fixed_block = |tb: &[f64]| {
        let mut full = tb.to_vec();
        full.extend_from_slice(&rest);
        problem.neg_loglik(&full)
    };
    let info = hessian(&fixed_block, &theta[..p]);
    let vcov_internal = spd_inverse(&info)
        .ok_or_else(|| Error::RankDeficient("observed information for the fixed effects is not positive definite".into()))?;
    let vcov = layout.natural_vcov(&beta, &vcov_internal);

    let fulls = prep
        .curve_fulls(&layout, &beta)
        .ok_or_else(|| Error::Evaluation("fixed effects left the model domain".into()))?;
    let mut loglik = 0.0;
    let mut eblups = BTreeMap::new();
    for (c, (name, idx)) in prep.clusters.iter().enumerate() {
        let (ll, u) = problem
            .cluster_laplace(&fulls, idx, &chol, sigma, problem.cached_mode(c))
            .ok_or_else(|| Error::Evaluation(format!("Laplace step failed for cluster `{name}`")))?;
        loglik += ll;
        eblups.insert(name.clone(), (&chol * u).iter().copied().collect());
    }

    Ok(FitResult {
        estimator: Estimator::NLME,
        family,
        fixed_spec: fixed_spec.clone(),
        random_spec: Some(random_spec.clone()),
        beta_hat: beta,
        vcov_beta: matrix_to_rows(&vcov),
        omega_hat: Some(matrix_to_rows(&chol)),
        sigma_hat: sigma,
        rho_hat: None,
        loglik,
        converged: outcome.converged,
        iterations: outcome.iterations,
        beta_names: layout.names.clone(),
        curves: prep.curves.clone(),
        eblups: Some(eblups),
        cluster_curves: prep.cluster_curves(),
        rho_at_boundary: false,
    })
}

/// Laplace-approximate marginal log-likelihood at given parameter values.
/// `omega` is the lower Cholesky factor of the random-effects covariance.
pub fn marginal_loglik(
    ds: &Dataset,
    family: ModelFamily,
    fixed_spec: &FixedEffectsSpec,
    random_spec: &RandomEffectsSpec,
    beta: &[f64],
    omega: &DMatrix<f64>,
    sigma: f64,
) -> Result<f64> {
    random_spec.validate(family)?;
    let prep = Prepared::new(ds);
    let layout = FixedLayout::new(family, fixed_spec, &prep.curves)?;
    if beta.len() != layout.len() {
        return Err(Error::InvalidParameter(format!("expected {} fixed effects, got {}", layout.len(), beta.len())));
    }
    let q = random_spec.dim();
    if omega.nrows() != q || omega.ncols() != q {
        return Err(Error::Domain("omega has the wrong dimension".into()));
    }
    let problem = Problem::new(&prep, &layout, random_spec, NlmeOptions::default());
    let fulls = prep
        .curve_fulls(&layout, beta)
        .ok_or_else(|| Error::Evaluation("parameters outside the model domain".into()))?;
    let mut total = 0.0;
    for (name, idx) in &prep.clusters {
        let (ll, _) = problem
            .cluster_laplace(&fulls, idx, omega, sigma, DVector::zeros(q))
            .ok_or_else(|| Error::Evaluation(format!("Laplace step failed for cluster `{name}`")))?;
        total += ll;
    }
    Ok(total)
}

struct Problem<'a> {
    prep: &'a Prepared,
    layout: &'a FixedLayout,
    random: Vec<usize>,
    structure: CovarianceStructure,
    opts: NlmeOptions,
    /// Posterior modes from the latest successful evaluation, used as the
    /// starting point of the next inner solve.
    modes: RefCell<Vec<DVector<f64>>>,
}

impl<'a> Problem<'a> {
    fn new(prep: &'a Prepared, layout: &'a FixedLayout, spec: &RandomEffectsSpec, opts: NlmeOptions) -> Self {
        let q = spec.dim();
        Problem {
            prep,
            layout,
            random: spec.random_parameters.iter().map(|p| p.index()).collect(),
            structure: spec.covariance_structure,
            opts,
            modes: RefCell::new(vec![DVector::zeros(q); prep.clusters.len()]),
        }
    }

    fn q(&self) -> usize {
        self.random.len()
    }

    fn cached_mode(&self, c: usize) -> DVector<f64> {
        self.modes.borrow()[c].clone()
    }

    fn chol_from(&self, params: &[f64]) -> DMatrix<f64> {
        let q = self.q();
        let mut l = DMatrix::zeros(q, q);
        match self.structure {
            CovarianceStructure::Diagonal => {
                for i in 0..q {
                    l[(i, i)] = params[i].exp();
                }
            }
            CovarianceStructure::Unstructured => {
                let mut k = 0;
                for i in 0..q {
                    for j in 0..=i {
                        l[(i, j)] = if i == j { params[k].exp() } else { params[k] };
                        k += 1;
                    }
                }
            }
        }
        l
    }

    fn chol_params(&self, l: &DMatrix<f64>) -> Vec<f64> {
        let q = self.q();
        let floor = |v: f64| v.max(1e-300).ln();
        match self.structure {
            CovarianceStructure::Diagonal => (0..q).map(|i| floor(l[(i, i)])).collect(),
            CovarianceStructure::Unstructured => {
                let mut out = Vec::with_capacity(q * (q + 1) / 2);
                for i in 0..q {
                    for j in 0..=i {
                        out.push(if i == j { floor(l[(i, i)]) } else { l[(i, j)] });
                    }
                }
                out
            }
        }
    }

    fn n_chol(&self) -> usize {
        let q = self.q();
        match self.structure {
            CovarianceStructure::Diagonal => q,
            CovarianceStructure::Unstructured => q * (q + 1) / 2,
        }
    }

    /// Natural-scale `beta`, Cholesky factor and residual SD from `theta`.
    fn unpack(&self, theta: &[f64]) -> (Vec<f64>, DMatrix<f64>, f64) {
        let p = self.layout.len();
        let nc = self.n_chol();
        let beta = self.layout.to_natural(&theta[..p]);
        let chol = self.chol_from(&theta[p..p + nc]);
        let sigma = theta[p + nc].exp();
        (beta, chol, sigma)
    }

    fn neg_loglik(&self, theta: &[f64]) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let (beta, chol, sigma) = self.unpack(theta);
        if !(sigma.is_finite() && sigma > 0.0) || chol.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let Some(fulls) = self.prep.curve_fulls(self.layout, &beta) else {
            return f64::INFINITY;
        };
        let mut total = 0.0;
        let mut modes = Vec::with_capacity(self.prep.clusters.len());
        for (c, (_, idx)) in self.prep.clusters.iter().enumerate() {
            match self.cluster_laplace(&fulls, idx, &chol, sigma, self.cached_mode(c)) {
                Some((ll, u)) => {
                    total += ll;
                    modes.push(u);
                }
                None => return f64::INFINITY,
            }
        }
        *self.modes.borrow_mut() = modes;
        -total
    }

    /// Laplace contribution of one cluster and its posterior mode in `u`.
    fn cluster_laplace(
        &self,
        fulls: &[[f64; 5]],
        idx: &[usize],
        chol: &DMatrix<f64>,
        sigma: f64,
        start: DVector<f64>,
    ) -> Option<(f64, DVector<f64>)> {
        let prep = self.prep;
        let q = self.q();
        let n = idx.len();
        let s2 = sigma * sigma;

        let eval = |j: usize, b: &DVector<f64>, shift: Option<(usize, f64)>| -> f64 {
            let i = idx[j];
            let mut p = fulls[prep.curve[i]];
            for (r, &k) in self.random.iter().enumerate() {
                p[k] += b[r];
            }
            if let Some((r, h)) = shift {
                p[self.random[r]] += h;
            }
            if p[Param::E.index()] <= 0.0 || p[Param::F.index()] <= 0.0 {
                return f64::NAN;
            }
            eval_full(&p, prep.dose[i])
        };
        let steps: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| self.random.iter().map(|&k| fd_step(fulls[prep.curve[i]][k])).collect())
            .collect();

        let objective = |u: &DVector<f64>| -> Option<f64> {
            let b = chol * u;
            let mut rss = 0.0;
            for (j, &i) in idx.iter().enumerate().take(n) {
                let r = prep.y[i] - eval(j, &b, None);
                rss += r * r;
            }
            let h = 0.5 * rss / s2 + 0.5 * u.norm_squared();
            h.is_finite().then_some(h)
        };
        // residuals, d f / d u and objective value at u
        let linearize = |u: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
            let b = chol * u;
            let mut r = DVector::zeros(n);
            let mut jb = DMatrix::zeros(n, q);
            for j in 0..n {
                r[j] = prep.y[idx[j]] - eval(j, &b, None);
                for k in 0..q {
                    let h = steps[j][k];
                    jb[(j, k)] = (eval(j, &b, Some((k, h))) - eval(j, &b, Some((k, -h)))) / (2.0 * h);
                }
            }
            let ju = jb * chol;
            let h = 0.5 * r.norm_squared() / s2 + 0.5 * u.norm_squared();
            (h.is_finite() && ju.iter().all(|v| v.is_finite())).then_some((r, ju, h))
        };

        let mut u = if start.len() == q && objective(&start).is_some() { start } else { DVector::zeros(q) };
        let mut lin = linearize(&u)?;
        for _ in 0..self.opts.max_inner {
            let (r, ju, h0) = &lin;
            let hess = DMatrix::identity(q, q) + ju.tr_mul(ju) / s2;
            let grad = &u - ju.tr_mul(r) / s2;
            let delta = -hess.cholesky()?.solve(&grad);
            let scale = 1.0 + u.amax();
            if delta.amax() < 1e-4 * scale {
                // close to the mode the objective cannot resolve a descent
                // check, so take the full step
                u += &delta;
                lin = linearize(&u)?;
                if delta.amax() < self.opts.inner_tol * scale {
                    break;
                }
                continue;
            }
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let trial = &u + &delta * t;
                if let Some(ht) = objective(&trial) {
                    if ht <= *h0 {
                        u = trial;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
            lin = linearize(&u)?;
            if (&delta * t).amax() < self.opts.inner_tol * (1.0 + u.amax()) {
                break;
            }
        }

        let (_, ju, h) = lin;
        let hess = DMatrix::identity(q, q) + ju.tr_mul(&ju) / s2;
        let chol_h = hess.cholesky()?;
        let logdet: f64 = 2.0 * chol_h.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ll = -0.5 * n as f64 * (LN_2PI + s2.ln()) - h - 0.5 * logdet;
        ll.is_finite().then_some((ll, u))
    }
}

/// Starting standard deviations of the random effects and residual SD.
///
/// Uses the spread of per-cluster least-squares fits when every cluster can
/// be fitted on its own, and 10% of each fixed effect otherwise.
fn variance_start(
    prep: &Prepared,
    layout: &FixedLayout,
    spec: &RandomEffectsSpec,
    beta_nls: &[f64],
    rss_nls: f64,
) -> (Vec<f64>, f64) {
    let family = layout.family;
    let n = prep.n();
    let sigma_nls = (rss_nls / n.saturating_sub(layout.len()).max(1) as f64).sqrt().max(1e-8);
    let y_range = prep.y.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
        - prep.y.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let scales: Vec<f64> = spec
        .random_parameters
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = (0..prep.curves.len()).map(|k| layout.curve_full(beta_nls, k)[p.index()].abs()).collect();
            let s = vals.iter().sum::<f64>() / vals.len() as f64;
            if s > 1e-8 {
                s
            } else if matches!(p, Param::C | Param::D) && y_range > 0.0 {
                y_range
            } else {
                1.0
            }
        })
        .collect();
    let fallback = (scales.iter().map(|s| 0.1 * s).collect::<Vec<_>>(), sigma_nls);

    let single = FixedLayout::new(family, &FixedEffectsSpec::all_shared(family), &["_".to_string()])
        .expect("single-curve layout");
    let mut devs: Vec<Vec<f64>> = Vec::new();
    let (mut rss, mut df) = (0.0, 0usize);
    for (_, idx) in &prep.clusters {
        let first = prep.curve[idx[0]];
        if idx.iter().any(|&i| prep.curve[i] != first) || idx.len() <= family.parameter_count() {
            return fallback;
        }
        let sub = Prepared {
            dose: idx.iter().map(|&i| prep.dose[i]).collect(),
            y: idx.iter().map(|&i| prep.y[i]).collect(),
            curve: vec![0; idx.len()],
            clusters: vec![("_".into(), (0..idx.len()).collect())],
            curves: vec!["_".into()],
        };
        let fit = start_beta(&sub, &single).and_then(|b0| least_squares(&sub, &single, &b0));
        let Ok(fit) = fit else { return fallback };
        let est = single.curve_full(&single.to_natural(&fit.x), 0);
        let base = layout.curve_full(beta_nls, first);
        devs.push(spec.random_parameters.iter().map(|p| est[p.index()] - base[p.index()]).collect());
        rss += fit.rss;
        df += idx.len() - family.parameter_count();
    }
    let m = devs.len() as f64;
    let sds = (0..spec.dim())
        .map(|r| {
            let mean = devs.iter().map(|d| d[r]).sum::<f64>() / m;
            let var = devs.iter().map(|d| (d[r] - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            let sd = var.sqrt();
            let s = scales[r];
            if sd.is_finite() { sd.clamp(1e-3 * s, 0.5 * s) } else { 0.1 * s }
        })
        .collect();
    let sigma = if df > 0 { (rss / df as f64).sqrt().max(1e-8) } else { sigma_nls };
    (sds, sigma.min(sigma_nls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::estimators::loglik::iid_loglik;
    use crate::models::Param;

    fn doses() -> Vec<f64> {
        (0..10).map(|j| 0.01 * 300f64.powf(j as f64 / 9.0)).collect()
    }

    fn data(m: usize, shifts: impl Fn(usize) -> (f64, f64)) -> Dataset {
        let mut obs = Vec::new();
        for c in 0..m {
            let (dc, dd) = shifts(c);
            let full = [1.5, 10.0 + dc, 100.0 + dd, 0.3, 1.0];
            for (j, &x) in doses().iter().enumerate() {
                let noise = 2.0 * ((c * 17 + j * 5) as f64 * 0.37).sin();
                obs.push(Observation { dose: x, response: eval_full(&full, x) + noise, cluster_id: format!("c{c:02}"), curve_id: "1".into() });
            }
        }
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn zero_covariance_gives_iid_likelihood() {
        let ds = data(4, |c| (c as f64, 2.0 * c as f64));
        let fam = ModelFamily::LL4;
        let spec = FixedEffectsSpec::all_shared(fam);
        let re = RandomEffectsSpec::new(vec![Param::C, Param::D], CovarianceStructure::Unstructured);
        let beta = [1.4, 11.0, 101.0, 0.31];
        let a = marginal_loglik(&ds, fam, &spec, &re, &beta, &DMatrix::zeros(2, 2), 2.5).unwrap();
        let b = iid_loglik(&ds, fam, &spec, &beta, 2.5).unwrap();
        assert!((a - b).abs() < 1e-10 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn identical_clusters_collapse_variance() {
        let ds = data(5, |_| (0.0, 0.0));
        let fam = ModelFamily::LL4;
        let spec = FixedEffectsSpec::all_shared(fam);
        // identical clusters: every cluster gets the same noise pattern
        let obs: Vec<Observation> = ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let j = i % 10;
                let full = [1.5, 10.0, 100.0, 0.3, 1.0];
                Observation { response: eval_full(&full, o.dose) + 2.0 * (j as f64 * 0.9).sin(), ..o.clone() }
            })
            .collect();
        let ds = Dataset::new(obs).unwrap();
        let re = RandomEffectsSpec::new(vec![Param::C, Param::D], CovarianceStructure::Diagonal);
        let fit = fit_nlme(&ds, fam, &spec, &re).unwrap();
        let nls = crate::estimators::fit_nls(&ds, fam, &spec).unwrap();
        let g = fit.g_matrix().unwrap();
        for (k, p) in [Param::C, Param::D].iter().enumerate() {
            let scale = nls.beta_hat[fam.position(*p).unwrap()].abs();
            assert!(g[(k, k)] < 1e-3 * scale, "G[{k}] = {}", g[(k, k)]);
        }
        for (a, b) in fit.beta_hat.iter().zip(&nls.beta_hat) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{:?} vs {:?}", fit.beta_hat, nls.beta_hat);
        }
    }

    #[test]
    fn reported_loglik_matches_evaluator() {
        let ds = data(6, |c| (3.0 * ((c as f64) * 1.3).sin(), 15.0 * ((c as f64) * 0.7).cos()));
        let fam = ModelFamily::LL4;
        let spec = FixedEffectsSpec::all_shared(fam);
        let re = RandomEffectsSpec::new(vec![Param::C, Param::D], CovarianceStructure::Unstructured);
        let fit = fit_nlme(&ds, fam, &spec, &re).unwrap();
        assert!(fit.converged);
        let ll = marginal_loglik(&ds, fam, &spec, &re, &fit.beta_hat, &fit.omega_matrix().unwrap(), fit.sigma_hat).unwrap();
        assert!((ll - fit.loglik).abs() < 1e-8 * ll.abs().max(1.0), "{ll} vs {}", fit.loglik);
        let v = fit.vcov_matrix();
        assert!((&v - v.transpose()).abs().max() < 1e-12);
        assert!(v.diagonal().iter().all(|d| *d >= 0.0));
        let sds = fit.random_sds().unwrap();
        assert!(sds[1] > 5.0, "{sds:?}");
        assert_eq!(fit.eblups.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn needs_two_clusters() {
        let ds = data(1, |_| (0.0, 0.0));
        let re = RandomEffectsSpec::new(vec![Param::D], CovarianceStructure::Diagonal);
        let fam = ModelFamily::LL4;
        assert!(fit_nlme(&ds, fam, &FixedEffectsSpec::all_shared(fam), &re).is_err());
    }
}
