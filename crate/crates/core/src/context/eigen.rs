//! Cyclic Jacobi eigensolver for small symmetric matrices.

use crate::error::{CbsaError, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order and the matching unit eigenvectors as the
/// columns of the returned matrix.
///
/// Iterates until the off-diagonal Frobenius norm drops below
/// `tol * max(1, ||A||_F)`. Each eigenvector is signed so that its
/// largest-magnitude entry (first on ties) is positive.
pub fn symmetric_eigen(a: &Tensor, tol: f64) -> Result<(Vec<f64>, Tensor)> {
    let (n, cols) = a.dims();
    if n != cols {
        return Err(CbsaError::dim(format!("eigensolver needs a square matrix, got {:?}", a.shape())));
    }
    for i in 0..n {
        for j in 0..i {
            if (a.at(i, j) - a.at(j, i)).abs() > 1e-12 * (1.0 + a.at(i, j).abs()) {
                return Err(CbsaError::Contract(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&m) < tol * scale;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(CbsaError::Numeric(format!(
                "Jacobi did not converge in {MAX_SWEEPS} sweeps (off-diagonal {:e})",
                off(&m)
            )));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off(&m) < tol * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 1..n {
            if v[r * n + src].abs() > v[best * n + src].abs() + 1e-12 {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors.set(r, col, sign * v[r * n + src]);
        }
    }
    Ok((values, vectors))
}
