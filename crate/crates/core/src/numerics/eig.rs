//! Symmetric eigendecomposition by cyclic Jacobi rotations, and the
//! matrix square root of symmetric PSD matrices built on top of it.
//!
//! Jacobi is slower than tridiagonalization+QR for large matrices but is
//! simple and very accurate, and the matrices here stay small (statistics
//! dimension ≤ 128).

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 64;
/// Relative asymmetry tolerated before an input is rejected.
const SYMMETRY_RTOL: f64 = 1e-9;
/// Eigenvalues below `-PSD_RTOL * max|λ|` make a matrix materially non-PSD.
const PSD_RTOL: f64 = 1e-6;

fn check_symmetric(a: &Matrix<f64>, op: &str) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::Dim(format!(
            "{op}: matrix is {}x{}, expected square",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs();
    let tol = SYMMETRY_RTOL * scale;
    for r in 0..a.rows() {
        for c in 0..r {
            if (a[(r, c)] - a[(c, r)]).abs() > tol {
                return Err(Error::NotSymmetric(format!(
                    "{op}: |a[{r},{c}] - a[{c},{r}]| = {} exceeds {tol}",
                    (a[(r, c)] - a[(c, r)]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix: `A = V·diag(λ)·Vᵀ`.
///
/// Returns eigenvalues in ascending order with matching orthonormal
/// eigenvector columns in `V`.
pub fn sym_eig(a: &Matrix<f64>) -> Result<(Vec<f64>, Matrix<f64>)> {
    check_symmetric(a, "sym_eig")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::Empty("sym_eig on 0x0 matrix".into()));
    }
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * m.frob_norm().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                // Rotations on entries that are already negligible relative to
                // the diagonal only churn round-off.
                if apq.abs() <= f64::EPSILON * (m[(p, p)].abs() + m[(q, q)].abs()).max(1e-300) {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new_col)] = v[(k, old_col)];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Square root of a symmetric PSD matrix: returns `R` with `R·R == A`.
///
/// Round-off negatives down to `-PSD_RTOL·max|λ|` are clamped to zero;
/// anything more negative is rejected as non-PSD.
pub fn sqrtm_psd(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (eigenvalues, v) = sym_eig(a)?;
    let max_abs = eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let floor = -PSD_RTOL * max_abs;
    // Eigenvalues this small relative to the spectrum are exact zeros of a
    // rank-deficient input perturbed by round-off; √ would amplify that
    // noise from 1e-14 to 1e-7, so they are zeroed before the root.
    let zero_band = 1e-13 * max_abs;
    let mut roots = Vec::with_capacity(eigenvalues.len());
    for &l in &eigenvalues {
        if l < floor {
            return Err(Error::NotPsd(format!(
                "eigenvalue {l} below tolerance {floor}"
            )));
        }
        roots.push(if l <= zero_band { 0.0 } else { l.sqrt() });
    }
    // R = V·diag(√λ)·Vᵀ
    let n = a.rows();
    let mut scaled = v.clone();
    for r in 0..n {
        for c in 0..n {
            scaled[(r, c)] *= roots[c];
        }
    }
    Ok(scaled.matmul_nt(&v)?.symmetrized())
}

/// Singular values of a square matrix by one-sided Jacobi rotations.
///
/// Columns are rotated pairwise until mutually orthogonal; their norms are
/// then the singular values. Unlike forming `AᵀA`, this keeps high relative
/// accuracy on small singular values, which the Wasserstein cross term
/// needs for near-singular covariances.
pub fn singular_values(a: &Matrix<f64>) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(Error::Dim(format!(
            "singular_values: {}x{} matrix, expected square",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Empty("singular_values on 0x0 matrix".into()));
    }
    let mut m = a.clone();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..n {
                    app += m[(r, p)] * m[(r, p)];
                    aqq += m[(r, q)] * m[(r, q)];
                    apq += m[(r, p)] * m[(r, q)];
                }
                if apq.abs() <= f64::EPSILON * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (zeta * zeta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let mp = m[(r, p)];
                    let mq = m[(r, q)];
                    m[(r, p)] = c * mp - s * mq;
                    m[(r, q)] = s * mp + c * mq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|r| m[(r, j)] * m[(r, j)]).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sigma)
}
