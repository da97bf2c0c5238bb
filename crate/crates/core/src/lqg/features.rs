//! Half-vectorization and the matching quadratic feature map.
//!
//! Both use upper-triangular row-major order, so `x'Mx = bar_features(x) . theta_halfvec(M)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub fn halfvec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// `[m11, m12, ..., m1n, m22, ..., mnn]`, unscaled.
pub fn theta_halfvec(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    linalg::ensure_symmetric(m, "matrix to half-vectorize")?;
    let n = m.nrows();
    let mut out = Vec::with_capacity(halfvec_len(n));
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// `[x1^2, 2 x1 x2, ..., 2 x1 xn, x2^2, ..., xn^2]`
pub fn bar_features(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(halfvec_len(n));
    for i in 0..n {
        out.push(x[i] * x[i]);
        for j in i + 1..n {
            out.push(2.0 * x[i] * x[j]);
        }
    }
    DVector::from_vec(out)
}

/// Inverse of [`theta_halfvec`].
pub fn halfvec_to_sym(theta: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if theta.len() != halfvec_len(n) {
        return Err(Error::Dimension(format!("half-vector of length {} does not fit a {n}x{n} matrix", theta.len())));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = theta[idx];
            m[(j, i)] = theta[idx];
            idx += 1;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;

    #[test]
    fn identity_example() {
        let theta = theta_halfvec(&DMatrix::identity(2, 2)).unwrap();
        let xb = bar_features(&DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(theta.as_slice(), &[1.0, 0.0, 1.0]);
        assert_eq!(xb.as_slice(), &[1.0, 4.0, 4.0]);
        assert_eq!(theta.dot(&xb), 5.0);
    }

    #[test]
    fn first_entries_are_first_row() {
        let m = mat(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 5.0], &[3.0, 5.0, 6.0]]);
        let theta = theta_halfvec(&m).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(halfvec_to_sym(&theta, 3).unwrap(), m);
    }

    #[test]
    fn rejects_asymmetric_and_bad_length() {
        assert!(theta_halfvec(&mat(&[&[1.0, 2.0], &[0.0, 1.0]])).is_err());
        assert!(halfvec_to_sym(&DVector::zeros(4), 2).is_err());
    }
}
