//! Small dense linear algebra on row-major slices.
//!
//! Everything is written as plain nested loops with a fixed summation
//! order, which keeps results bit-identical across platforms. Matrices at
//! desk scale are at most a few hundred wide, so no blocking is needed.

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// y = M x for row-major M (rows x cols).
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
    y
}

/// y = M^T x for row-major M (rows x cols); result has length cols.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let xr = x[r];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
    y
}

/// C = A B with A (ar x ac), B (ac x bc), all row-major.
pub fn matmul(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), ar * ac);
    debug_assert_eq!(b.len(), ac * bc);
    let mut c = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            let aik = a[i * ac + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            let crow = &mut c[i * bc..(i + 1) * bc];
            for j in 0..bc {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// grad += outer(d, x): d (rows), x (cols), grad row-major rows x cols.
pub fn outer_acc(grad: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(grad.len(), d.len() * cols);
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        let row = &mut grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += dr * x[c];
        }
    }
}

pub fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Random orthogonal matrix (n x n) via modified Gram-Schmidt on a seeded
/// Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let g = rng.normal_vec(n * n);
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| g[r * n + c]).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|r| cols[i][r] * cols[j][r]).sum();
            for r in 0..n {
                cols[i][r] -= dot * cols[j][r];
            }
        }
        let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "degenerate Gaussian draw in Gram-Schmidt");
        for r in 0..n {
            cols[i][r] /= norm;
        }
    }
    let mut q = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            q[r * n + c] = cols[c][r];
        }
    }
    q
}

/// Solves A X = B for X with A (n x n), B (n x k), via LU with partial
/// pivoting. Errors on a singular pivot.
pub fn solve(a: &[f64], n: usize, b: &[f64], k: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * k);
    let mut lu = a.to_vec();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[perm[col] * n + col].abs();
        for r in (col + 1)..n {
            let v = lu[perm[r] * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::InvalidInput(
                "singular matrix in linear solve".to_string(),
            ));
        }
        perm.swap(col, piv);
        let prow = perm[col];
        let pval = lu[prow * n + col];
        for r in (col + 1)..n {
            let row = perm[r];
            let factor = lu[row * n + col] / pval;
            lu[row * n + col] = factor;
            for c in (col + 1)..n {
                lu[row * n + c] -= factor * lu[prow * n + c];
            }
            for c in 0..k {
                x[row * k + c] -= factor * x[prow * k + c];
            }
        }
    }
    // back substitution
    let mut out = vec![0.0; n * k];
    for c in 0..k {
        for row in (0..n).rev() {
            let prow = perm[row];
            let mut acc = x[prow * k + c];
            for j in (row + 1)..n {
                acc -= lu[prow * n + j] * out[j * k + c];
            }
            out[row * k + c] = acc / lu[prow * n + row];
        }
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvectors as
/// columns of the returned matrix.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    let s = if theta > 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[p * n + i];
                    let mqi = m[q * n + i];
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let vals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + new_c] = v[r * n + old_c];
        }
    }
    (vals, vecs)
}

/// Rank-k reconstruction of a row matrix M (rows x cols) via the
/// eigendecomposition of M M^T: U_k U_k^T M.
pub fn rank_k_reconstruction(m: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= rows);
    let mut gram = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += m[i * cols + c] * m[j * cols + c];
            }
            gram[i * rows + j] = acc;
        }
    }
    let (_vals, vecs) = jacobi_eigh(&gram, rows);
    // P = U_k U_k^T (rows x rows), then P M.
    let mut proj = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut acc = 0.0;
            for e in 0..k {
                acc += vecs[i * rows + e] * vecs[j * rows + e];
            }
            proj[i * rows + j] = acc;
        }
    }
    matmul(&proj, rows, rows, m, cols)
}

/// Truncated SVD factors of M (rows x cols) at rank k, via the
/// eigendecomposition of M^T M. Returns (B, A) with B (rows x k),
/// A (k x cols) and M ~= B A.
pub fn truncated_svd_factors(m: &[f64], rows: usize, cols: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1);
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += m[r * cols + i] * m[r * cols + j];
            }
            gram[i * cols + j] = acc;
        }
    }
    let (vals, vecs) = jacobi_eigh(&gram, cols);
    let rank = k.min(cols);
    let mut b = vec![0.0; rows * k];
    let mut a = vec![0.0; k * cols];
    for e in 0..rank {
        let sigma2 = vals[e].max(0.0);
        let sigma = sigma2.sqrt();
        if sigma < 1e-12 {
            continue;
        }
        // right singular vector
        let vcol: Vec<f64> = (0..cols).map(|r| vecs[r * cols + e]).collect();
        // u = M v / sigma
        let u = matvec(m, rows, cols, &vcol);
        let root = sigma.sqrt();
        for r in 0..rows {
            b[r * k + e] = u[r] / sigma * root;
        }
        for c in 0..cols {
            a[e * cols + c] = root * vcol[c];
        }
    }
    (b, a)
}
