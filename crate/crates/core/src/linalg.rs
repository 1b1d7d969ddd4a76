//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{DMatrix, DVector};

/// In-place exact resymmetrization `P <- (P + Pᵀ)/2`.
///
/// Afterwards `P[(i, j)] == P[(j, i)]` bit-for-bit.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    debug_assert_eq!(n, p.ncols());
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut p: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut p);
    p
}

/// Largest absolute asymmetry `max |P - Pᵀ|`.
pub fn asymmetry(p: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_square(m: &DMatrix<f64>, n: usize) -> bool {
    m.nrows() == n && m.ncols() == n
}

pub fn all_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// True when `m` is symmetric to `tol` and its smallest eigenvalue is `>= -tol·scale`.
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() || !all_finite_matrix(m) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let scale = m.amax().max(1.0);
    if asymmetry(m) > tol * scale {
        return false;
    }
    let eig = symmetrized(m.clone()).symmetric_eigenvalues();
    eig.min() >= -tol * scale
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrized(m.clone()).cholesky()?;
    Some(symmetrized(chol.inverse()))
}

/// Symmetric square root factor `L` with `L Lᵀ = M` for a PSD matrix.
///
/// Negative eigenvalues from roundoff are clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let is_diag = (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == 0.0));
    if is_diag {
        return DMatrix::from_diagonal(&m.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let eig = symmetrized(m.clone()).symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Lower-triangular factor `S` (nonnegative diagonal) with `S Sᵀ = A Aᵀ`,
/// computed from a QR decomposition of `Aᵀ`. `A` is `d × m` with `m >= d`.
pub fn lower_factor_from_compound(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    let r = a.transpose().qr().r();
    let mut s = r.transpose();
    // s is lower-triangular (d × d) when m >= d
    for j in 0..d {
        if s[(j, j)] < 0.0 {
            s.column_mut(j).neg_mut();
        }
    }
    s
}

/// Rank-one Cholesky modification of a lower factor: `L Lᵀ <- L Lᵀ + sign·x xᵀ`.
///
/// Returns `false` (leaving `l` partially modified) if a downdate would lose
/// positive definiteness.
pub fn cholesky_rank_one(l: &mut DMatrix<f64>, x: &DVector<f64>, downdate: bool) -> bool {
    let n = l.nrows();
    let mut x = x.clone();
    let sign = if downdate { -1.0 } else { 1.0 };
    for k in 0..n {
        let lkk = l[(k, k)];
        if lkk == 0.0 {
            return false;
        }
        let r2 = lkk * lkk + sign * x[k] * x[k];
        if !(r2 > 0.0) || !r2.is_finite() {
            return false;
        }
        let r = r2.sqrt();
        let c = r / lkk;
        let s = x[k] / lkk;
        l[(k, k)] = r;
        for i in (k + 1)..n {
            let v = (l[(i, k)] + sign * s * x[i]) / c;
            x[i] = c * x[i] - s * v;
            l[(i, k)] = v;
        }
    }
    true
}

/// Orthonormal columns from a Gaussian matrix via QR, with the sign
/// convention `diag(R) > 0` so the result is Haar-distributed.
pub fn orthonormalize(g: DMatrix<f64>) -> DMatrix<f64> {
    let cols = g.ncols();
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
