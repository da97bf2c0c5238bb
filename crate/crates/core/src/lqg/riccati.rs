use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_assumptions, CostParams, LinearSystem};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiccatiOptions {
    /// Frobenius-norm tolerance on `P - RHS(P)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions { tol: 1e-10, max_iter: 100_000 }
    }
}

/// Right-hand side of the discounted Riccati equation.
pub fn riccati_rhs(sys: &LinearSystem, cost: &CostParams, gamma: f64, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (&sys.a, &sys.b);
    let bt_p = b.transpose() * p;
    let g = &cost.e_mat + &bt_p * b * gamma;
    let bt_p_a = &bt_p * a;
    let g_inv_bpa = linalg::solve(&g, &bt_p_a, "E + gamma B'PB")?;
    let rhs = &cost.d_mat + a.transpose() * p * a * gamma - bt_p_a.transpose() * g_inv_bpa * (gamma * gamma);
    Ok(linalg::symmetrize(&rhs))
}

pub fn riccati_residual(sys: &LinearSystem, cost: &CostParams, gamma: f64, p: &DMatrix<f64>) -> Result<f64> {
    Ok((p - riccati_rhs(sys, cost, gamma, p)?).norm())
}

/// Value iteration on the Riccati map, started from `P = D`.
pub fn riccati_solve(sys: &LinearSystem, cost: &CostParams, gamma: f64, opts: &RiccatiOptions) -> Result<DMatrix<f64>> {
    riccati_solve_from(sys, cost, gamma, opts, &cost.d_mat)
}

pub fn riccati_solve_from(
    sys: &LinearSystem,
    cost: &CostParams,
    gamma: f64,
    opts: &RiccatiOptions,
    init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Parameter(format!("discount must lie in (0, 1), got {gamma}")));
    }
    let report = check_assumptions(sys, cost)?;
    if !report.controllable {
        return Err(Error::Parameter("(A, B) is not controllable".into()));
    }
    if !report.observable {
        return Err(Error::Parameter("(A, D^1/2) is not observable".into()));
    }
    if linalg::min_eigenvalue(&cost.d_mat) < -linalg::PSD_TOL {
        return Err(Error::NotPositiveDefinite("D is not positive semidefinite".into()));
    }
    if linalg::min_eigenvalue(&cost.e_mat) <= 0.0 {
        return Err(Error::NotPositiveDefinite("E is not positive definite".into()));
    }
    if init.shape() != (sys.n(), sys.n()) {
        return Err(Error::Dimension("initial P has the wrong shape".into()));
    }

    let mut p = linalg::symmetrize(init);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = riccati_rhs(sys, cost, gamma, &p)?;
        residual = (&next - &p).norm();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            // `p` is now RHS(previous); report the residual of the returned matrix itself.
            if riccati_residual(sys, cost, gamma, &p)? <= opts.tol {
                return Ok(p);
            }
        }
    }
    Err(Error::RiccatiNoConvergence { iterations: opts.max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;
    use nalgebra::DVector;

    fn scalar(a: f64) -> (LinearSystem, CostParams) {
        (
            LinearSystem::new(mat(&[&[a]]), mat(&[&[1.0]]), mat(&[&[1.0]]), 0.0).unwrap(),
            CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap(),
        )
    }

    #[test]
    fn zero_dynamics_gives_d() {
        let (sys, cost) = scalar(0.0);
        let p = riccati_solve(&sys, &cost, 0.9, &RiccatiOptions::default()).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_fixed_point() {
        // Oracle: p <- 1 + 0.9*0.25 p - 0.81*0.25 p^2 / (1 + 0.9 p), iterated to 1e-12.
        let oracle = 1.125_822_048_322_579;
        let (sys, cost) = scalar(0.5);
        let p = riccati_solve(&sys, &cost, 0.9, &RiccatiOptions::default()).unwrap();
        assert!((p[(0, 0)] - oracle).abs() < 1e-9, "{}", p[(0, 0)]);
    }

    #[test]
    fn non_pd_e_rejected() {
        let (sys, mut cost) = scalar(0.5);
        cost.e_mat[(0, 0)] = 0.0;
        assert!(matches!(riccati_solve(&sys, &cost, 0.9, &RiccatiOptions::default()), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let (sys, cost) = scalar(0.99);
        let opts = RiccatiOptions { tol: 1e-14, max_iter: 3 };
        match riccati_solve(&sys, &cost, 0.9, &opts) {
            Err(Error::RiccatiNoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
