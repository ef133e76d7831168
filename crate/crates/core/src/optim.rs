//! Optimizers shared by the estimators: Levenberg-Marquardt for least
//! squares, BFGS for smooth objectives, and Brent's method in one dimension.
//!
//! All derivatives are central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::fd_step;

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative decrease of the residual sum of squares.
    pub ftol: f64,
    /// Largest cosine between a Jacobian column and the residual vector.
    pub gtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 200, ftol: 1e-10, gtol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub rss: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Central-difference Jacobian of a vector function. Falls back to a
/// one-sided difference where the function is undefined on one side.
pub fn jacobian<F>(f: &F, x: &[f64], fx: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = fx.len();
    let mut jac = DMatrix::zeros(n, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = fd_step(x[k]);
        xp[k] = x[k] + h;
        let hi = f(&xp);
        xp[k] = x[k] - h;
        let lo = f(&xp);
        xp[k] = x[k];
        match (hi, lo) {
            (Some(hi), Some(lo)) => {
                for i in 0..n {
                    jac[(i, k)] = (hi[i] - lo[i]) / (2.0 * h);
                }
            }
            (Some(hi), None) => {
                for i in 0..n {
                    jac[(i, k)] = (hi[i] - fx[i]) / h;
                }
            }
            (None, Some(lo)) => {
                for i in 0..n {
                    jac[(i, k)] = (fx[i] - lo[i]) / h;
                }
            }
            (None, None) => return None,
        }
    }
    Some(jac)
}

/// Minimize `||r(x)||^2`. `resid` returns `None` where the parameters are
/// outside the model's domain; such trial steps are rejected.
pub fn levenberg_marquardt<F>(resid: F, x0: &[f64], opts: LmOptions) -> Result<LmOutcome>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut r = DVector::from_vec(
        resid(&x).ok_or_else(|| Error::InvalidParameter("starting values outside the model domain".into()))?,
    );
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite residuals at starting values".into()));
    }
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let jac = jacobian(&resid, &x, &r)
            .ok_or_else(|| Error::Evaluation("Jacobian undefined at current estimate".into()))?;
        let g = jac.tr_mul(&r);
        let rnorm = cost.sqrt();
        if cost == 0.0 {
            converged = true;
            break;
        }
        let cos_max = (0..x.len())
            .map(|k| {
                let cn = jac.column(k).norm();
                if cn == 0.0 { 0.0 } else { g[k].abs() / (cn * rnorm) }
            })
            .fold(0.0f64, f64::max);
        if cos_max < opts.gtol {
            converged = true;
            break;
        }
        let a = jac.tr_mul(&jac);
        let diag_floor = a.diagonal().max() * 1e-12;
        loop {
            let mut m = a.clone();
            for k in 0..x.len() {
                m[(k, k)] += lambda * a[(k, k)].max(diag_floor).max(f64::MIN_POSITIVE);
            }
            let step = m.cholesky().map(|c| c.solve(&(-&g)));
            if let Some(step) = step {
                let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if let Some(rn) = resid(&xn) {
                    let rn = DVector::from_vec(rn);
                    let cn = rn.norm_squared();
                    if cn.is_finite() && cn < cost {
                        let rel = (cost - cn) / cost;
                        let step_small = step.norm() <= 1e-12 * (DVector::from_column_slice(&x).norm() + 1e-12);
                        x = xn;
                        r = rn;
                        cost = cn;
                        lambda = (lambda / 10.0).max(1e-12);
                        if rel < opts.ftol || step_small || cost == 0.0 {
                            converged = true;
                            break 'outer;
                        }
                        break;
                    }
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent is possible at working precision
                converged = true;
                break 'outer;
            }
        }
    }

    let jacobian = jacobian(&resid, &x, &r)
        .ok_or_else(|| Error::Evaluation("Jacobian undefined at the optimum".into()))?;
    Ok(LmOutcome { x, rss: cost, residuals: r, jacobian, converged, iterations })
}

/// Central-difference gradient with the crate-wide step rule.
pub fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = fd_step(x[k]);
            xp[k] = x[k] + h;
            let hi = f(&xp);
            xp[k] = x[k] - h;
            let lo = f(&xp);
            xp[k] = x[k];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference Hessian using function values only.
pub fn hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| f64::EPSILON.powf(0.25) * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let eval = |xp: &mut Vec<f64>, moves: &[(usize, f64)]| {
        for &(k, d) in moves {
            xp[k] += d;
        }
        let v = f(xp);
        for &(k, d) in moves {
            xp[k] -= d;
        }
        v
    };
    for i in 0..n {
        let fp = eval(&mut xp, &[(i, h[i])]);
        let fm = eval(&mut xp, &[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&mut xp, &[(i, h[i]), (j, h[j])]);
            let fpm = eval(&mut xp, &[(i, h[i]), (j, -h[j])]);
            let fmp = eval(&mut xp, &[(i, -h[i]), (j, h[j])]);
            let fmm = eval(&mut xp, &[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Bound on `max_k |g_k| * max(|x_k|, 1) / max(|f|, 1)`.
    pub rel_gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 500, rel_gtol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn relative_gradient(g: &[f64], x: &[f64], fx: f64) -> f64 {
    g.iter()
        .zip(x)
        .map(|(g, x)| g.abs() * x.abs().max(1.0))
        .fold(0.0, f64::max)
        / fx.abs().max(1.0)
}

/// Inverse of a finite-difference Hessian, repaired to be positive definite.
fn inverse_hessian_start<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h = hessian(f, x);
    if h.iter().all(|v| v.is_finite()) {
        let sym = (&h + h.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_ev > 0.0 {
            let floor = max_ev * 1e-10;
            let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.abs().max(floor));
            return &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        }
    }
    let d: Vec<f64> = x.iter().map(|v| 1e-2 * v.abs().max(1.0).powi(2)).collect();
    debug_assert_eq!(d.len(), n);
    DMatrix::from_diagonal(&DVector::from_vec(d))
}

/// Quasi-Newton minimization with an inverse-Hessian start taken from a
/// finite-difference Hessian. `f` should return `+inf` outside its domain.
pub fn bfgs<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: BfgsOptions) -> MinimizeOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return MinimizeOutcome { x, value: fx, converged: false, iterations: 0 };
    }
    let mut g = gradient(&f, &x);
    let mut hinv = inverse_hessian_start(&f, &x);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if relative_gradient(&g, &x, fx) < opts.rel_gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&hinv * &gv);
        if dir.dot(&gv) >= 0.0 {
            hinv = inverse_hessian_start(&f, &x);
            fresh = true;
            dir = -(&hinv * &gv);
        }
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if fresh {
                break;
            }
            hinv = inverse_hessian_start(&f, &x);
            fresh = true;
            continue;
        };
        let gn = gradient(&f, &xn);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        let f_change = (fx - fnew).abs();
        x = xn;
        g = gn;
        let prev = fx;
        fx = fnew;
        fresh = false;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if f_change <= 1e-15 * prev.abs().max(1.0) && relative_gradient(&g, &x, fx) < opts.rel_gtol * 1e2 {
            converged = true;
            break;
        }
    }
    if !converged && relative_gradient(&g, &x, fx) < opts.rel_gtol {
        converged = true;
    }
    MinimizeOutcome { x, value: fx, converged, iterations }
}

/// Brent's minimization of a scalar function on `[lo, hi]`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u < x { b = x } else { a = x }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x { a = u } else { b = u }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let inv = sym.cholesky()?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

/// Ratio of smallest to largest singular value of `m` after scaling its
/// columns to unit norm.
pub fn scaled_condition(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    for mut c in s.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let sv = s.singular_values();
    let max = sv.max();
    if max == 0.0 { 0.0 } else { sv.min() / max }
}
