use nalgebra::{DMatrix, DVector};

use super::riccati::{riccati_solve, RiccatiOptions};
use super::{CostParams, LinearSystem, Policy, QMatrix, ValueQuad};
use crate::error::{Error, Result};
use crate::linalg;

/// Optimal affine policy and value for `(sys, cost, gamma)` with default solver options.
pub fn dlqg(sys: &LinearSystem, cost: &CostParams, gamma: f64) -> Result<(Policy, ValueQuad)> {
    dlqg_with(sys, cost, gamma, &RiccatiOptions::default())
}

pub fn dlqg_with(sys: &LinearSystem, cost: &CostParams, gamma: f64, opts: &RiccatiOptions) -> Result<(Policy, ValueQuad)> {
    let p = riccati_solve(sys, cost, gamma, opts)?;
    let (a, b) = (&sys.a, &sys.b);
    let n = sys.n();
    let g = &cost.e_mat + b.transpose() * &p * b * gamma;
    let gain = -linalg::solve(&g, &(b.transpose() * &p * a), "E + gamma B'PB")? * gamma;
    let ac = sys.closed_loop(&gain);

    let lhs = DMatrix::identity(n, n) - ac.transpose() * gamma;
    let h = linalg::solve_vec(&lhs, &cost.d_vec, "I - gamma Ac'").expect("I - gamma Ac' is invertible for a stabilizing gain");
    let bt_h = b.transpose() * &h;
    let g_inv_bth = linalg::solve_vec(&g, &bt_h, "E + gamma B'PB")?;
    let offset = &g_inv_bth * (-0.5 * gamma);
    let l = (cost.r + gamma * noise_term(sys, &p) - 0.25 * gamma * gamma * bt_h.dot(&g_inv_bth)) / (1.0 - gamma);

    Ok((Policy { gain, offset }, ValueQuad { p, h, l }))
}

/// `sigma^2 tr(C'PC)`
fn noise_term(sys: &LinearSystem, p: &DMatrix<f64>) -> f64 {
    sys.noise_std * sys.noise_std * (sys.c.transpose() * p * &sys.c).trace()
}

/// Exact value `(P, h, l)` of running `policy` forever.
pub fn policy_evaluate(sys: &LinearSystem, cost: &CostParams, gamma: f64, policy: &Policy) -> Result<ValueQuad> {
    cost.check_against(sys)?;
    policy.ensure_stabilizing(sys)?;
    let (b, e) = (&sys.b, &cost.e_mat);
    let (gain, k) = (&policy.gain, &policy.offset);
    let n = sys.n();
    let ac = sys.closed_loop(gain);

    let q = &cost.d_mat + gain.transpose() * e * gain;
    let p = linalg::discounted_lyapunov(&ac, &q, gamma)?;

    let bk = b * k;
    let rhs = &cost.d_vec + gain.transpose() * (e * k) * 2.0 + ac.transpose() * (&p * &bk) * (2.0 * gamma);
    let lhs = DMatrix::identity(n, n) - ac.transpose() * gamma;
    let h = linalg::solve_vec(&lhs, &rhs, "I - gamma Ac'")?;

    let quad_k = k.dot(&(e * k));
    let l = (cost.r + quad_k + gamma * (bk.dot(&(&p * &bk)) + noise_term(sys, &p) + h.dot(&bk))) / (1.0 - gamma);
    Ok(ValueQuad { p, h, l })
}

/// Q-function matrix of the policy whose value is `value`.
pub fn q_matrix(sys: &LinearSystem, cost: &CostParams, gamma: f64, value: &ValueQuad) -> Result<QMatrix> {
    cost.check_against(sys)?;
    let (n, m) = (sys.n(), sys.m());
    if value.p.shape() != (n, n) || value.h.len() != n {
        return Err(Error::Dimension("value function does not match the system".into()));
    }
    let (a, b, p) = (&sys.a, &sys.b, &value.p);
    let mut h = DMatrix::zeros(n + m + 1, n + m + 1);
    let hxx = &cost.d_mat + a.transpose() * p * a * gamma;
    let hxu = a.transpose() * p * b * gamma;
    let huu = &cost.e_mat + b.transpose() * p * b * gamma;
    let hx1: DVector<f64> = (&cost.d_vec + a.transpose() * &value.h * gamma) * 0.5;
    let hu1: DVector<f64> = b.transpose() * &value.h * (0.5 * gamma);
    let h11 = cost.r + gamma * noise_term(sys, p) + gamma * value.l;

    h.view_mut((0, 0), (n, n)).copy_from(&hxx);
    h.view_mut((0, n), (n, m)).copy_from(&hxu);
    h.view_mut((n, 0), (m, n)).copy_from(&hxu.transpose());
    h.view_mut((n, n), (m, m)).copy_from(&huu);
    h.view_mut((0, n + m), (n, 1)).copy_from(&hx1);
    h.view_mut((n + m, 0), (1, n)).copy_from(&hx1.transpose());
    h.view_mut((n, n + m), (m, 1)).copy_from(&hu1);
    h.view_mut((n + m, n), (1, m)).copy_from(&hu1.transpose());
    h[(n + m, n + m)] = h11;
    Ok(QMatrix { h: linalg::symmetrize(&h), n, m })
}

/// Greedy policy of a Q-function: `(-H_uu^-1 H_ux, -H_uu^-1 H_u1)`.
pub fn policy_improve(q: &QMatrix) -> Result<Policy> {
    let huu = q.huu();
    if linalg::min_eigenvalue(&huu) <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!("H_uu (min eigenvalue {:e})", linalg::min_eigenvalue(&huu))));
    }
    let chol = huu.cholesky().ok_or_else(|| Error::NotPositiveDefinite("H_uu".into()))?;
    let gain = -chol.solve(&q.hux());
    let offset = -chol.solve(&q.hu1());
    Ok(Policy { gain, offset })
}
