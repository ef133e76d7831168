//! Gauss-Hermite rules for the standard normal density and tensor grids.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest grid accepted by [`build_grid`].
pub const MAX_GRID_POINTS: usize = 1_000_000;

/// Probabilists' Gauss-Hermite nodes and weights (weights sum to one),
/// nodes ascending. Nodes start from the eigenvalues of the Jacobi matrix of
/// the Hermite recurrence and are polished by Newton steps; weights come
/// from the Christoffel function, which stays accurate in the tails.
pub fn gauss_hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 1 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut roots: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    roots.sort_by(f64::total_cmp);

    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = roots[n - 1 - i];
        for _ in 0..3 {
            let (hn, hn1, _) = orthonormal_hermite(n, x);
            let step = hn / ((n as f64).sqrt() * hn1);
            if !step.is_finite() {
                break;
            }
            x -= step;
        }
        if n % 2 == 1 && i == n / 2 {
            x = 0.0;
        }
        let (_, _, christoffel) = orthonormal_hermite(n, x);
        let w = 1.0 / christoffel;
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

/// `(h_n(x), h_{n-1}(x), sum_{k<n} h_k(x)^2)` for the Hermite polynomials
/// orthonormal under the standard normal density.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    let mut sum = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum)
}

/// Tensor-product rule on the standard normal scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub points_per_dim: usize,
    pub dimension: usize,
    /// `dimension x points` matrix; column `k` is the `k`-th node.
    pub nodes: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Full tensor grid with the last dimension varying fastest.
pub fn build_grid(n: usize, p: usize) -> Result<QuadratureGrid> {
    if p < 1 {
        return Err(Error::Domain("grid dimension must be at least one".into()));
    }
    let (nodes_1d, weights_1d) = gauss_hermite_1d(n)?;
    let total = u32::try_from(p)
        .ok()
        .and_then(|p32| n.checked_pow(p32))
        .filter(|&t| t <= MAX_GRID_POINTS)
        .ok_or_else(|| {
            Error::Resource(format!(
                "{n}^{p} quadrature points exceed the limit of {MAX_GRID_POINTS}; use fewer points per dimension"
            ))
        })?;

    let mut nodes = DMatrix::zeros(p, total);
    let mut weights = vec![0.0; total];
    let mut digits = vec![0usize; p];
    for k in 0..total {
        let mut w = 1.0;
        for (r, &d) in digits.iter().enumerate() {
            nodes[(r, k)] = nodes_1d[d];
            w *= weights_1d[d];
        }
        weights[k] = w;
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < n {
                break;
            }
            *d = 0;
        }
    }
    Ok(QuadratureGrid { points_per_dim: n, dimension: p, nodes, weights })
}

/// Lower-triangular `L` with `L L^T = G` for symmetric positive
/// semi-definite `G`. Directions with no variance get zero columns.
pub fn psd_cholesky(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = g.nrows();
    if g.ncols() != p {
        return Err(Error::Domain(format!("covariance must be square, got {}x{}", p, g.ncols())));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("covariance has non-finite entries".into()));
    }
    let scale = g.amax().max(1.0);
    if (g - g.transpose()).amax() > 1e-8 * scale {
        return Err(Error::Domain("covariance is not symmetric".into()));
    }
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (g + g.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(Error::Domain(format!("covariance has a negative eigenvalue {min_eig:e}")));
    }

    let tiny = 1e-14 * scale;
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let d = sym[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tiny {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..p {
            let s = sym[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Nodes mapped to `N(0, G)`: row `k` is `(L psi_k)^T`.
pub fn transform_nodes(grid: &QuadratureGrid, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.nrows() != grid.dimension {
        return Err(Error::Domain(format!(
            "covariance dimension {} does not match grid dimension {}",
            g.nrows(),
            grid.dimension
        )));
    }
    let l = psd_cholesky(g)?;
    Ok((l * &grid.nodes).transpose())
}
