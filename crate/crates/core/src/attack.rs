//! Cost-parameter falsification: the minimal-change program that makes a
//! chosen policy optimal, a frequency-domain feasibility check, and the
//! falsified cost channel.

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, upper, BlockId, BlockKind, BlockValue, ConicProblem, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::io::{mat, vector};
use crate::linalg;
use crate::lqg::{dlqg, CostParams, LinearSystem, Policy};

/// The attacker's desired policy `(K', k')`.
pub type AttackTarget = Policy;

/// Lower bound used for strictly positive definite input weights.
pub const EPS_STRICT: f64 = 1e-6;
/// Round-trip tolerance (max entry) for certification.
pub const CERTIFY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackOptions {
    pub solver: SolverOptions,
    pub eps_strict: f64,
    pub certify_tol: f64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions { solver: SolverOptions::default(), eps_strict: EPS_STRICT, certify_tol: CERTIFY_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSolution {
    pub status: SolveStatus,
    pub cost_dag: CostParams,
    /// `||D' - D||_F + ||d' - d|| + ||E' - E||_F`
    pub objective: f64,
    pub certified: bool,
    /// Optimal policy under `cost_dag`, when it could be computed.
    pub achieved: Option<Policy>,
    pub target: Policy,
    /// Largest entry of `|achieved - target|`.
    pub certification_error: Option<f64>,
    #[serde(rename = "P", with = "mat")]
    pub p: DMatrix<f64>,
    #[serde(with = "vector")]
    pub h: DVector<f64>,
    pub e_min_eigenvalue: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Block handles of the attack program.
#[derive(Debug, Clone, Copy)]
pub struct AttackBlocks {
    pub d_mat: BlockId,
    pub e_mat: BlockId,
    pub d_vec: BlockId,
    pub p: BlockId,
    pub h: BlockId,
}

/// Adds the optimality conditions of `target` for dynamics `(a, b)` as equality rows.
pub(crate) fn add_optimality_rows(
    prob: &mut ConicProblem,
    blocks: &AttackBlocks,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
    target: &Policy,
) -> Result<()> {
    let (kg, ko) = (target.gain.clone(), target.offset.clone());
    let (a, b) = (a.clone(), b.clone());
    let ac = &a + &b * &kg;
    let bl = *blocks;
    prob.add_equalities(move |v| {
        let (dt, et, dv, p, h) = (v.matrix(bl.d_mat), v.matrix(bl.e_mat), v.vector(bl.d_vec), v.matrix(bl.p), v.vector(bl.h));
        let g = &et + b.transpose() * &p * &b * gamma;
        let riccati = &p - &dt - a.transpose() * &p * &a * gamma + kg.transpose() * &g * &kg;
        let gain = &g * &kg + b.transpose() * &p * &a * gamma;
        let value = &h - &dv - ac.transpose() * &h * gamma;
        let offset = &g * &ko * 2.0 + b.transpose() * &h * gamma;
        let mut out = upper(&riccati).as_slice().to_vec();
        out.extend(gain.iter());
        out.extend(value.iter());
        out.extend(offset.iter());
        DVector::from_vec(out)
    })?;
    Ok(())
}

/// Declares the blocks `D, E, d, P, h` with their cone constraints.
pub(crate) fn declare_blocks(prob: &mut ConicProblem, n: usize, m: usize, eps_strict: f64) -> Result<AttackBlocks> {
    let blocks = AttackBlocks {
        d_mat: prob.add_block("D", BlockKind::Symmetric { n }),
        e_mat: prob.add_block("E", BlockKind::Symmetric { n: m }),
        d_vec: prob.add_block("d", BlockKind::Vector { n }),
        p: prob.add_block("P", BlockKind::Symmetric { n }),
        h: prob.add_block("h", BlockKind::Vector { n }),
    };
    prob.add_psd(blocks.p, 0.0)?;
    prob.add_psd(blocks.d_mat, 0.0)?;
    prob.add_psd(blocks.e_mat, eps_strict)?;
    Ok(blocks)
}

pub fn build_attack_problem(
    sys: &LinearSystem,
    cost: &CostParams,
    gamma: f64,
    target: &AttackTarget,
    eps_strict: f64,
) -> Result<(ConicProblem, AttackBlocks)> {
    cost.check_against(sys)?;
    target.check_against(sys)?;
    let mut prob = ConicProblem::new();
    let blocks = declare_blocks(&mut prob, sys.n(), sys.m(), eps_strict)?;
    prob.add_distance(blocks.d_mat, &BlockValue::Symmetric { value: cost.d_mat.clone() }, 1.0)?;
    prob.add_distance(blocks.d_vec, &BlockValue::Vector { value: cost.d_vec.clone() }, 1.0)?;
    prob.add_distance(blocks.e_mat, &BlockValue::Symmetric { value: cost.e_mat.clone() }, 1.0)?;
    add_optimality_rows(&mut prob, &blocks, &sys.a, &sys.b, gamma, target)?;
    Ok((prob, blocks))
}

/// Solves the falsification program for `target` and certifies the result by re-solving the control problem.
pub fn synthesize(
    sys: &LinearSystem,
    cost: &CostParams,
    gamma: f64,
    target: &AttackTarget,
    opts: &AttackOptions,
) -> Result<AttackSolution> {
    target.ensure_stabilizing(sys)?;
    let (prob, blocks) = build_attack_problem(sys, cost, gamma, target, opts.eps_strict)?;
    let sol = conic::solve(&prob, &opts.solver)?;
    if sol.status == SolveStatus::InfeasibleDetected {
        return Err(Error::Infeasible("no cost parameters make the target policy optimal".into()));
    }
    let x = &sol.x;
    let get = |id: BlockId| prob.decode(id, x);
    let as_mat = |v: BlockValue| match v {
        BlockValue::Symmetric { value } | BlockValue::Matrix { value } => value,
        _ => unreachable!("matrix block"),
    };
    let as_vec = |v: BlockValue| match v {
        BlockValue::Vector { value } => value,
        _ => unreachable!("vector block"),
    };
    let cost_dag = CostParams {
        // Residual-level negative eigenvalues would trip the PSD check downstream.
        d_mat: linalg::clip_eigenvalues(&as_mat(get(blocks.d_mat)), 0.0),
        e_mat: as_mat(get(blocks.e_mat)),
        d_vec: as_vec(get(blocks.d_vec)),
        r: cost.r,
    };
    let p = as_mat(get(blocks.p));
    let h = as_vec(get(blocks.h));
    let objective =
        (&cost_dag.d_mat - &cost.d_mat).norm() + (&cost_dag.d_vec - &cost.d_vec).norm() + (&cost_dag.e_mat - &cost.e_mat).norm();

    let (achieved, certification_error, certified) = certify(sys, &cost_dag, gamma, target, opts.certify_tol);
    if sol.status == SolveStatus::Optimal && !certified {
        log::warn!("solver reported optimal but the round trip misses the target by {certification_error:?}");
    }
    Ok(AttackSolution {
        status: sol.status,
        e_min_eigenvalue: linalg::min_eigenvalue(&cost_dag.e_mat),
        cost_dag,
        objective,
        certified,
        achieved,
        target: target.clone(),
        certification_error,
        p,
        h,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
    })
}

/// Re-solves the control problem under `cost_dag` and compares with `target`.
pub fn certify(sys: &LinearSystem, cost_dag: &CostParams, gamma: f64, target: &Policy, tol: f64) -> (Option<Policy>, Option<f64>, bool) {
    match dlqg(sys, cost_dag, gamma) {
        Ok((pi, _)) => {
            let err = pi.max_abs_diff(target);
            (Some(pi), Some(err), err <= tol)
        }
        Err(e) => {
            log::warn!("certification solve failed: {e}");
            (None, None, false)
        }
    }
}

/// `x'D'x + d''x + r + u'E'u`; the cost channel seen by an attacked learner.
pub fn falsified_cost(cost_dag: &CostParams, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    cost_dag.evaluate(x, u)
}

/// Coefficients `(a, b, c)` of `|c'(x,u) - c(x,u)| <= a|x|^2 + b|u|^2 + c|x| + |r' - r|`.
pub fn deviation_envelope(cost: &CostParams, cost_dag: &CostParams) -> [f64; 3] {
    [
        linalg::spectral_norm(&(&cost_dag.d_mat - &cost.d_mat)),
        linalg::spectral_norm(&(&cost_dag.e_mat - &cost.e_mat)),
        (&cost_dag.d_vec - &cost.d_vec).norm(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cond3Status {
    NotCheckedSymbolically,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FeasibleEvidence,
    InfeasibleEvidence,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub omega: f64,
    /// `None` when the point was skipped as ill-conditioned.
    pub min_eig: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub cond1_w0_min_eig: f64,
    /// Largest entry of `W(0) - W(0)'`; the symmetric part is what gets tested.
    pub w0_asymmetry: f64,
    pub cond2_min_eig_over_grid: f64,
    pub grid_size: usize,
    pub skipped_points: usize,
    pub tol: f64,
    pub cond3_status: Cond3Status,
    pub verdict: Verdict,
    pub series: Vec<FrequencyPoint>,
}

pub const FEASIBILITY_TOL: f64 = 1e-7;
pub const FEASIBILITY_GRID: usize = 1024;
const COND_LIMIT: f64 = 1e10;

type CMat = DMatrix<Complex<f64>>;

fn to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(|v| Complex::new(v, 0.0))
}

/// Smallest eigenvalue of a Hermitian matrix via its real symmetric embedding.
fn hermitian_min_eig(x: &CMat) -> f64 {
    let m = x.nrows();
    let mut big = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            let z = 0.5 * (x[(i, j)] + x[(j, i)].conj());
            big[(i, j)] = z.re;
            big[(i + m, j + m)] = z.re;
            big[(i, j + m)] = -z.im;
            big[(i + m, j)] = z.im;
        }
    }
    linalg::min_eigenvalue(&big)
}

/// Frequency-domain evidence that `target` is optimal for some quadratic cost with input weight `e_trial`.
///
/// With `L = e_trial^{1/2}` and `s = sqrt(gamma)`, the return-difference matrix is
/// `W(z) = I - L K (zI - sA)^{-1} sB L^{-1}`. Condition 1 asks that the symmetric
/// part `W0` of `W(0)` be positive definite; condition 2 asks that
/// `W(z)^H W0^{-1} W(z) - I` be positive semidefinite on the unit circle.
pub fn feasibility_check(
    sys: &LinearSystem,
    e_trial: &DMatrix<f64>,
    gamma: f64,
    target: &AttackTarget,
    grid_size: usize,
) -> Result<FeasibilityReport> {
    sys.validate()?;
    target.check_against(sys)?;
    if linalg::rank(&sys.a) < sys.n() {
        return Err(Error::RankDeficient("A is singular".into()));
    }
    linalg::ensure_symmetric(e_trial, "E_trial")?;
    if e_trial.nrows() != sys.m() {
        return Err(Error::Dimension(format!("E_trial must be {0}x{0}", sys.m())));
    }
    if linalg::min_eigenvalue(e_trial) <= 0.0 {
        return Err(Error::NotPositiveDefinite("E_trial".into()));
    }
    target.ensure_stabilizing(sys)?;
    if grid_size == 0 {
        return Err(Error::Parameter("grid size must be positive".into()));
    }

    let (n, m) = (sys.n(), sys.m());
    let s = gamma.sqrt();
    let left = linalg::sym_sqrt(e_trial);
    let right = linalg::sym_inv_sqrt(e_trial)?;
    let lk = to_complex(&(&left * &target.gain));
    let sb_r = to_complex(&(&sys.b * s * &right));
    let sa = to_complex(&(&sys.a * s));
    let eye_m = CMat::identity(m, m);

    let w_at = |z: Complex<f64>| -> Option<CMat> {
        let shift = CMat::identity(n, n) * z - &sa;
        let sv = shift.clone().singular_values();
        let (hi, lo) = sv.iter().fold((0.0_f64, f64::INFINITY), |(h, l), &v| (h.max(v), l.min(v)));
        if lo == 0.0 || hi / lo > COND_LIMIT {
            return None;
        }
        let sol = shift.lu().solve(&sb_r)?;
        Some(&eye_m - &lk * sol)
    };

    let w0 = w_at(Complex::new(0.0, 0.0)).ok_or_else(|| Error::RankDeficient("A is numerically singular".into()))?;
    let w0_re = w0.map(|z| z.re);
    let w0_asymmetry = linalg::asymmetry(&w0_re);
    let w0s = linalg::symmetrize(&w0_re);
    let cond1 = linalg::min_eigenvalue(&w0s);

    let middle = if cond1 > 0.0 { Some(to_complex(&linalg::inverse(&w0s, "W(0)")?)) } else { None };

    let series: Vec<FrequencyPoint> = (0..grid_size)
        .into_par_iter()
        .map(|i| {
            let omega = 2.0 * std::f64::consts::PI * i as f64 / grid_size as f64;
            let min_eig = middle.as_ref().and_then(|mid| {
                let w = w_at(Complex::from_polar(1.0, omega))?;
                let x = w.adjoint() * mid * &w - &eye_m;
                Some(hermitian_min_eig(&x))
            });
            FrequencyPoint { omega, min_eig }
        })
        .collect();

    let skipped = series.iter().filter(|p| p.min_eig.is_none()).count();
    let cond2 = series.iter().filter_map(|p| p.min_eig).fold(f64::INFINITY, f64::min);
    let tol = FEASIBILITY_TOL;
    let verdict = if cond1 <= 0.0 {
        Verdict::InfeasibleEvidence
    } else if skipped == grid_size {
        Verdict::Inconclusive
    } else if cond2 >= -tol {
        Verdict::FeasibleEvidence
    } else if cond2 < -10.0 * tol {
        Verdict::InfeasibleEvidence
    } else {
        Verdict::Inconclusive
    };
    Ok(FeasibilityReport {
        cond1_w0_min_eig: cond1,
        w0_asymmetry,
        cond2_min_eig_over_grid: cond2,
        grid_size,
        skipped_points: skipped,
        tol,
        cond3_status: Cond3Status::NotCheckedSymbolically,
        verdict,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;
    use crate::vehicle;

    fn scalar(a: f64, b: f64) -> LinearSystem {
        LinearSystem::new(mat(&[&[a]]), mat(&[&[b]]), mat(&[&[1.0]]), 0.0).unwrap()
    }

    #[test]
    fn self_target_needs_no_change() {
        let sys = scalar(0.8, 1.0);
        let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[2.0]]), DVector::from_element(1, 0.3), 0.0).unwrap();
        let (pi, _) = dlqg(&sys, &cost, 0.9).unwrap();
        let sol = synthesize(&sys, &cost, 0.9, &pi, &AttackOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective < 1e-7, "{}", sol.objective);
        assert!(sol.certified);
    }

    #[test]
    fn scalar_round_trip() {
        let sys = scalar(0.9, 0.5);
        let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap();
        let target = Policy::new(mat(&[&[-0.8]]), DVector::from_element(1, 0.4)).unwrap();
        let sol = synthesize(&sys, &cost, 0.9, &target, &AttackOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.certified);
        assert!(sol.certification_error.unwrap() < 1e-6);
    }

    #[test]
    fn unstable_target_rejected() {
        let sys = scalar(1.2, 1.0);
        let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap();
        let bad = Policy::new(mat(&[&[0.0]]), DVector::zeros(1)).unwrap();
        assert!(matches!(synthesize(&sys, &cost, 0.9, &bad, &AttackOptions::default()), Err(Error::NotStabilizing(_))));
        assert!(matches!(feasibility_check(&sys, &mat(&[&[1.0]]), 0.9, &bad, 16), Err(Error::NotStabilizing(_))));
    }

    #[test]
    fn identity_falsification_and_constant_term() {
        let cost = vehicle::cost();
        let x = DVector::from_row_slice(&[0.3, -1.0, 2.0, 0.1, 0.0, -0.5]);
        let u = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        assert_eq!(falsified_cost(&cost, &x, &u), cost.evaluate(&x, &u));
        let mut shifted = cost.clone();
        shifted.r = 1.25;
        assert_eq!(falsified_cost(&shifted, &DVector::zeros(6), &DVector::zeros(3)), 1.25);
    }

    #[test]
    fn singular_a_and_bad_weight_rejected() {
        let sys = scalar(0.0, 1.0);
        let t = Policy::new(mat(&[&[-0.1]]), DVector::zeros(1)).unwrap();
        assert!(matches!(feasibility_check(&sys, &mat(&[&[1.0]]), 0.9, &t, 16), Err(Error::RankDeficient(_))));
        let sys = scalar(0.5, 1.0);
        assert!(matches!(feasibility_check(&sys, &mat(&[&[-1.0]]), 0.9, &t, 16), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn optimal_scalar_gain_satisfies_return_difference() {
        for (a, b, d, e) in [(0.5, 1.0, 1.0, 1.0), (1.1, 0.7, 2.0, 0.3), (0.9, 1.5, 0.4, 2.5)] {
            let sys = scalar(a, b);
            let cost = CostParams::new(mat(&[&[d]]), mat(&[&[e]]), DVector::zeros(1), 0.0).unwrap();
            let (pi, _) = dlqg(&sys, &cost, 0.9).unwrap();
            let rep = feasibility_check(&sys, &cost.e_mat, 0.9, &pi, 1024).unwrap();
            assert!(rep.cond1_w0_min_eig > 0.0);
            assert!(rep.cond2_min_eig_over_grid >= -1e-9, "{}", rep.cond2_min_eig_over_grid);
            assert_eq!(rep.verdict, Verdict::FeasibleEvidence);
        }
    }

    #[test]
    fn scalar_return_difference_by_hand() {
        // Scalar transfer function: w(z) = 1 - k s b / (z - s a), min over |z| = 1
        // of |w|^2 / w(0) - 1, evaluated directly.
        let (a, b, gamma) = (0.8, 1.0, 0.9);
        let sys = scalar(a, b);
        let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap();
        let (pi, _) = dlqg(&sys, &cost, gamma).unwrap();
        let k = pi.gain[(0, 0)];
        let s: f64 = gamma.sqrt();
        let w = |z: Complex<f64>| Complex::new(1.0, 0.0) - Complex::new(k * s * b, 0.0) / (z - Complex::new(s * a, 0.0));
        let w0 = w(Complex::new(0.0, 0.0)).re;
        let oracle = (0..1024)
            .map(|i| {
                let z = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * i as f64 / 1024.0);
                w(z).norm_sqr() / w0 - 1.0
            })
            .fold(f64::INFINITY, f64::min);
        let rep = feasibility_check(&sys, &cost.e_mat, gamma, &pi, 1024).unwrap();
        assert!((rep.cond1_w0_min_eig - w0).abs() < 1e-12);
        assert!((rep.cond2_min_eig_over_grid - oracle).abs() < 1e-10);
    }
}
