//! Small dense linear-algebra helpers shared by the geometry code.
//!
//! Everything here works on `nalgebra` column-major matrices. The QR helpers
//! fix the sign convention (non-negative diagonal of `R`) so that factorisations
//! are reproducible and orthonormal inputs map to themselves.

use nalgebra::{Cholesky, DMatrix, DVector, QR, SVD};

pub type Mat = DMatrix<f64>;

/// Thin QR factorisation `A = Q R` with `diag(R) >= 0`.
///
/// For an `m x n` input `Q` is `m x k` and `R` is `k x n`, `k = min(m, n)`.
pub fn qr_thin(a: &Mat) -> (Mat, Mat) {
    let qr = QR::new(a.clone());
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Orthonormal basis of the orthogonal complement of `range(q)`.
///
/// `q` is expected to have orthonormal columns (`m x r`, `r <= m`); the result is
/// `m x (m - r)`.
pub fn orth_complement(q: &Mat) -> Mat {
    let (m, r) = q.shape();
    if r >= m {
        return Mat::zeros(m, 0);
    }
    let qr = QR::new(q.clone());
    let mut full = Mat::identity(m, m);
    qr.q_tr_mul(&mut full);
    // full now holds Q_full^T; its rows r..m span the complement.
    full.rows(r, m - r).transpose()
}

/// Singular value decomposition with singular values in non-increasing order.
///
/// Returns `(U, s, V)` with `A = U diag(s) V^T`, `U: m x k`, `V: n x k`.
pub fn svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return (Mat::zeros(m, 0), Vec::new(), Mat::zeros(n, 0));
    }
    let dec = SVD::new(a.clone(), true, true);
    let u = dec.u.expect("left singular vectors requested");
    let vt = dec.v_t.expect("right singular vectors requested");
    let s = dec.singular_values;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut us = Mat::zeros(m, k);
    let mut vs = Mat::zeros(n, k);
    let mut ss = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &vt.row(src).transpose());
        ss.push(s[src]);
    }
    (us, ss, vs)
}

/// Singular values in non-increasing order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-major vectorisation.
pub fn vec(m: &Mat) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v)
}

/// Frobenius inner product.
pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Cholesky factorisation of a symmetric positive definite matrix with a
/// Tikhonov fallback.
///
/// The plain factorisation is tried first. Only when it fails is the diagonal
/// shifted by `1e-14 * trace / r`, growing tenfold until the factorisation
/// succeeds. The returned flag reports whether a shift was needed.
pub fn cholesky_regularized(a: &Mat) -> Option<(Cholesky<f64, nalgebra::Dyn>, bool)> {
    let sym = (a + a.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Some((c, false));
    }
    let r = sym.nrows().max(1) as f64;
    let base = (sym.trace().abs() / r).max(f64::MIN_POSITIVE);
    let mut delta = 1e-14 * base;
    for _ in 0..16 {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += delta;
        }
        if let Some(c) = Cholesky::new(shifted) {
            log::warn!("Gram matrix not numerically SPD; applied Tikhonov shift {delta:.3e}");
            return Some((c, true));
        }
        delta *= 10.0;
    }
    None
}

/// Ratio of largest to smallest diagonal entry of a Cholesky factor, squared.
/// A cheap lower bound on the spectral condition number.
pub fn cholesky_condition_estimate(c: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = c.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..l.nrows() {
        let v = l[(i, i)].abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}
