//! Dense linear-algebra helpers shared by every module.
//!
//! All norms are spectral (operator 2-norm) unless the name says otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below `RANK_RTOL * sigma_max` count as zero.
pub const RANK_RTOL: f64 = 1e-9;
/// A symmetric matrix is PSD when its smallest eigenvalue is at least `-PSD_TOL`.
pub const PSD_TOL: f64 = 1e-9;
/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYM_TOL: f64 = 1e-9;

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().fold(0.0_f64, |acc, &s| acc.max(s))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().fold(0.0_f64, |a, &s| a.max(s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && asymmetry(m) <= SYM_TOL * m.abs().max().max(1.0)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn ensure_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    if !is_symmetric(m) {
        return Err(Error::NotSymmetric(format!("{what} (asymmetry {:e})", asymmetry(m))));
    }
    Ok(())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().iter().fold(f64::INFINITY, |acc, &l| acc.min(l))
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().fold(f64::NEG_INFINITY, |acc, &l| acc.max(l))
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_eig_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(f);
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
pub fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if min_eigenvalue(m) >= floor {
        return symmetrize(m);
    }
    sym_eig_map(m, |l| l.max(floor))
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_eig_map(m, |l| l.max(0.0).sqrt())
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if min_eigenvalue(m) <= 0.0 {
        return Err(Error::NotPositiveDefinite("inverse square root".into()));
    }
    Ok(sym_eig_map(m, |l| 1.0 / l.sqrt()))
}

/// Solves `m x = b` for square `m`, failing when `m` is numerically singular.
pub fn solve(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().lu().solve(b).ok_or_else(|| Error::RankDeficient(format!("{what} is singular")))
}

pub fn solve_vec(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    m.clone().lu().solve(b).ok_or_else(|| Error::RankDeficient(format!("{what} is singular")))
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::RankDeficient(format!("{what} is singular")))
}

/// Moore-Penrose pseudo-inverse with the crate-wide rank threshold.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let cutoff = RANK_RTOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// `[B, AB, ..., A^{n-1}B]`
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    rank(&controllability_matrix(a, b)) == a.nrows()
}

/// `(A, C)` observable iff `(A', C')` controllable.
pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_controllable(&a.transpose(), &c.transpose())
}

/// Solves `P = Q + gamma * Ac' P Ac` by a dense Kronecker linear solve.
pub fn discounted_lyapunov(ac: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let n = ac.nrows();
    let act = ac.transpose();
    let lhs = DMatrix::identity(n * n, n * n) - act.kronecker(&act) * gamma;
    let rhs = DVector::from_column_slice(q.as_slice());
    let p = solve_vec(&lhs, &rhs, "discounted Lyapunov operator")?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, p.as_slice())))
}

pub fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}
