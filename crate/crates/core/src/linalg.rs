//! Small dense symmetric linear algebra: cyclic Jacobi
//! eigendecomposition and the PSD matrix square root. Enough for
//! Fréchet distances and PCA on metric-sized matrices; deterministic
//! and dependency-free.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as columns, so `a ~= V * diag(lambda) * V^T`. The input is
/// symmetrized first, so slightly asymmetric covariance estimates are
/// fine.
pub fn sym_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::argument(format!(
            "sym_eigen: matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("sym_eigen: non-finite input"));
    }
    let mut m = (a + &a.t()) * 0.5;
    let mut v = Array2::eye(n);
    if n <= 1 {
        let lambda = if n == 1 { vec![m[[0, 0]]] } else { vec![] };
        return Ok((lambda, v));
    }

    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob.max(1.0);
    let off = |m: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };

    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    if off(&m) > tol * 1e3 {
        return Err(Error::numeric("sym_eigen: Jacobi sweep did not converge"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let lambda: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[[row, src]];
        }
    }
    Ok((lambda, vectors))
}

/// Symmetric PSD square root via eigendecomposition. Small negative
/// eigenvalues from rounding are clamped to zero; a genuinely indefinite
/// input is an error.
pub fn sqrtm_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (lambda, v) = sym_eigen(a)?;
    let scale = lambda.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let floor = -1e-8 * scale.max(1.0);
    let mut roots = Vec::with_capacity(lambda.len());
    for &l in &lambda {
        if l < floor {
            return Err(Error::numeric(format!(
                "sqrtm_psd: matrix has negative eigenvalue {l}"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let n = lambda.len();
    let mut scaled = v.clone();
    for col in 0..n {
        for row in 0..n {
            scaled[[row, col]] *= roots[col];
        }
    }
    Ok(scaled.dot(&v.t()))
}

pub fn trace(a: &Array2<f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[[i, i]]).sum()
}
