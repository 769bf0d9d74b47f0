//! Symmetric eigendecomposition by cyclic Jacobi rotations and the
//! regularized inverse square root built on it.

use super::Matrix;
use crate::error::{shape_err, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with orthonormal eigenvectors stored as
/// the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Decomposes a symmetric matrix as `M = V diag(λ) Vᵀ`.
///
/// Symmetry is checked relative to the largest entry magnitude (absolute
/// for matrices with entries below one).
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    let n = m.rows();
    if m.cols() != n {
        return Err(shape_err(format!("sym_eig: {}x{} is not square", n, m.cols())));
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    m.ensure_finite("sym_eig input")?;

    // symmetrize exactly so rotations act on a truly symmetric matrix
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= f64::EPSILON * scale * 1e-3 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `(M + δI)^{-1/2}` for symmetric positive semi-definite `M`.
pub fn inv_sqrt_sym(m: &Matrix, delta: f64) -> Result<Matrix> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("regularizer must be >= 0, got {delta}")));
    }
    let eig = sym_eig(m)?;
    let lmax = eig.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = -1e-10 * lmax;
    let mut inv = Vec::with_capacity(eig.values.len());
    for &l in &eig.values {
        if l < floor {
            return Err(Error::NotPsd { value: l, max: lmax });
        }
        let shifted = l.max(0.0) + delta;
        if shifted <= 0.0 {
            return Err(Error::Numerical("inverse square root of a singular matrix; use delta > 0".into()));
        }
        inv.push(1.0 / shifted.sqrt());
    }
    let v = &eig.vectors;
    let n = v.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for (k, w) in inv.iter().enumerate() {
                s += v[(i, k)] * w * v[(j, k)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(out)
}
