mod common;

use common::*;
use lqg_deceive::adp::{ridge_solution, RlsState};
use lqg_deceive::attack::{certify, feasibility_check, synthesize, AttackOptions, Verdict, FEASIBILITY_TOL};
use lqg_deceive::bounds::{perturbation_bounds, tau, TAU_K_MAX, TAU_SETTLE_WINDOW};
use lqg_deceive::conic::{solve, BlockKind, BlockValue, ConicProblem, SolveStatus, SolverOptions};
use lqg_deceive::linalg::{self, mat};
use lqg_deceive::lqg::{
    bar_features, dlqg, policy_evaluate, policy_improve, q_matrix, riccati_residual, riccati_solve_from, theta_halfvec, CostParams,
    LinearSystem, Policy, RiccatiOptions,
};
use lqg_deceive::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=6).prop_flat_map(|n| (Just(n), 1usize..=n.min(3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn riccati_solution_is_a_unique_fixed_point(seed in any::<u64>(), (n, m) in dims()) {
        let (sys, cost, gamma) = random_problem(&mut rng(seed), n, m);
        let opts = RiccatiOptions::default();
        let from_d = riccati_solve_from(&sys, &cost, gamma, &opts, &cost.d_mat).unwrap();
        let from_zero = riccati_solve_from(&sys, &cost, gamma, &opts, &DMatrix::zeros(n, n)).unwrap();
        prop_assert!(riccati_residual(&sys, &cost, gamma, &from_d).unwrap() <= 1e-10);
        prop_assert!(riccati_residual(&sys, &cost, gamma, &from_zero).unwrap() <= 1e-10);
        prop_assert!((&from_d - &from_zero).amax() <= 1e-8);
    }

    #[test]
    fn policy_is_invariant_to_cost_scaling(seed in any::<u64>(), (n, m) in dims(), alpha in prop::sample::select(vec![0.1, 3.0, 10.0])) {
        let (sys, cost, gamma) = random_problem(&mut rng(seed), n, m);
        let (pi, value) = dlqg(&sys, &cost, gamma).unwrap();
        let (pi_a, value_a) = dlqg(&sys, &cost.scaled(alpha), gamma).unwrap();
        prop_assert!(pi.max_abs_diff(&pi_a) <= 1e-8);
        prop_assert!((&value.p * alpha - &value_a.p).amax() <= 1e-8 * alpha.max(1.0) * (1.0 + value.p.amax()));
    }

    #[test]
    fn noise_only_moves_the_constant(seed in any::<u64>(), (n, m) in dims()) {
        let (sys, cost, gamma) = random_problem(&mut rng(seed), n, m);
        let (pi0, v0) = dlqg(&sys.with_noise(0.0), &cost, gamma).unwrap();
        let (pi1, v1) = dlqg(&sys.with_noise(0.7), &cost, gamma).unwrap();
        prop_assert_eq!(&pi0, &pi1);
        prop_assert_eq!(&v0.p, &v1.p);
        prop_assert_eq!(&v0.h, &v1.h);
        prop_assert!(v1.l > v0.l);
    }

    #[test]
    fn zero_linear_term_gives_zero_offset(seed in any::<u64>(), (n, m) in dims()) {
        let (sys, cost, gamma) = random_problem(&mut rng(seed), n, m);
        let cost = CostParams { d_vec: DVector::zeros(n), ..cost };
        let (pi, value) = dlqg(&sys, &cost, gamma).unwrap();
        prop_assert_eq!(pi.offset.amax(), 0.0);
        prop_assert_eq!(value.h.amax(), 0.0);
    }

    #[test]
    fn policy_improvement_never_hurts(seed in any::<u64>(), (n, m) in dims()) {
        let mut g = rng(seed);
        let (sys, cost, gamma) = random_problem(&mut g, n, m);
        let other = CostParams::new(spd(&mut g, n, 0.05), spd(&mut g, m, 0.05), gaussian_vec(&mut g, n), 0.0).unwrap();
        let (start, _) = dlqg(&sys, &other, gamma).unwrap();
        let start = Policy::new(start.gain, gaussian_vec(&mut g, m)).unwrap();
        prop_assume!(start.is_stabilizing(&sys));
        let value = policy_evaluate(&sys, &cost, gamma, &start).unwrap();
        let improved = policy_improve(&q_matrix(&sys, &cost, gamma, &value).unwrap()).unwrap();
        prop_assume!(improved.is_stabilizing(&sys));
        let better = policy_evaluate(&sys, &cost, gamma, &improved).unwrap();
        let tol = 1e-9 * (1.0 + value.p.amax());
        prop_assert!(linalg::max_eigenvalue(&(&better.p - &value.p)) <= tol);
        let x = gaussian_vec(&mut g, n);
        prop_assert!(better.evaluate(&x) <= value.evaluate(&x) + tol * (1.0 + x.norm_squared()) + 1e-9 * value.l.abs());
    }

    #[test]
    fn quadratic_form_matches_feature_product(seed in any::<u64>(), n in 1usize..=8) {
        let mut g = rng(seed);
        let m = symmetric(&mut g, n);
        let x = gaussian_vec(&mut g, n);
        let direct = (x.transpose() * &m * &x)[(0, 0)];
        prop_assert!((direct - bar_features(&x).dot(&theta_halfvec(&m).unwrap())).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn rls_equals_ridge_and_information_grows(seed in any::<u64>(), p in 1usize..=12, samples in 1usize..=60) {
        let mut g = rng(seed);
        let theta0 = gaussian_vec(&mut g, p);
        let phis: Vec<_> = (0..samples).map(|_| gaussian_vec(&mut g, p)).collect();
        let costs: Vec<f64> = (0..samples).map(|_| gaussian_vec(&mut g, 1)[0] * 3.0).collect();
        let mut state = RlsState::new(theta0.clone(), 10.0);
        for (phi, c) in phis.iter().zip(&costs) {
            let before = state.s.clone();
            state.update(phi, *c);
            prop_assert!(linalg::min_eigenvalue(&(&before - &state.s)) >= -1e-12);
            prop_assert!(linalg::min_eigenvalue(&state.s) >= -1e-12);
        }
        let ridge = ridge_solution(&phis, &costs, &theta0, 10.0).unwrap();
        prop_assert!((&state.theta_hat - &ridge).amax() <= 1e-8 * (1.0 + ridge.amax()));
    }

    #[test]
    fn conic_distance_to_psd_cone_is_eigenvalue_clipping(seed in any::<u64>(), n in 1usize..=4) {
        let anchor = symmetric(&mut rng(seed), n) * 2.0;
        let mut p = ConicProblem::new();
        let x = p.add_block("X", BlockKind::Symmetric { n });
        p.add_distance(x, &BlockValue::Symmetric { value: anchor.clone() }, 1.0).unwrap();
        p.add_psd(x, 0.0).unwrap();
        let s = solve(&p, &SolverOptions::default()).unwrap();
        prop_assert_eq!(s.status, SolveStatus::Optimal);
        let oracle = linalg::sym_eig_map(&anchor, |l| l.max(0.0));
        prop_assert!((s.matrix("X").unwrap() - oracle).amax() < 1e-7);
    }

    #[test]
    fn conic_equality_projection_is_least_norm(seed in any::<u64>(), rows in 1usize..=3, extra in 1usize..=4) {
        let mut g = rng(seed);
        let cols = rows + extra;
        let a = gaussian(&mut g, rows, cols);
        let b = gaussian_vec(&mut g, rows);
        let mut p = ConicProblem::new();
        let x = p.add_block("x", BlockKind::Vector { n: cols });
        p.add_distance(x, &BlockValue::Vector { value: DVector::zeros(cols) }, 1.0).unwrap();
        let (a2, b2) = (a.clone(), b.clone());
        p.add_equalities(move |v| &a2 * v.vector(x) - &b2).unwrap();
        let s = solve(&p, &SolverOptions::default()).unwrap();
        prop_assert_eq!(s.status, SolveStatus::Optimal);
        let oracle = linalg::pinv(&a) * &b;
        prop_assert!((s.vector("x").unwrap() - oracle).amax() < 1e-7);
    }

    #[test]
    fn tau_is_at_least_one(seed in any::<u64>(), n in 1usize..=5) {
        let a = gaussian(&mut rng(seed), n, n);
        let m = &a * (0.9 / linalg::spectral_radius(&a).max(1e-9));
        prop_assume!(linalg::spectral_radius(&m) > 1e-6);
        prop_assert!(tau(&m, TAU_K_MAX, TAU_SETTLE_WINDOW).unwrap().value >= 1.0 - 1e-12);
    }

    #[test]
    fn tau_of_normal_matrix_is_one(seed in any::<u64>(), n in 1usize..=5) {
        let s = symmetric(&mut rng(seed), n);
        let m = &s * (0.9 / linalg::spectral_radius(&s).max(1e-9));
        prop_assume!(linalg::spectral_radius(&m) > 1e-6);
        prop_assert!((tau(&m, TAU_K_MAX, TAU_SETTLE_WINDOW).unwrap().value - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scaled_falsification_stays_certified(seed in any::<u64>(), alpha in prop::sample::select(vec![0.1, 3.0, 10.0])) {
        let mut g = rng(seed);
        let (sys, cost, gamma) = random_problem(&mut g, 2, 1);
        let cost_dag = CostParams::new(spd(&mut g, 2, 0.1), spd(&mut g, 1, 0.1), gaussian_vec(&mut g, 2), cost.r).unwrap();
        let (target, _) = dlqg(&sys, &cost_dag, gamma).unwrap();
        let opts = AttackOptions::default();
        let sol = synthesize(&sys, &cost, gamma, &target, &opts).unwrap();
        prop_assume!(sol.status == SolveStatus::Optimal);
        prop_assert!(sol.certified);
        let (_, err, ok) = certify(&sys, &sol.cost_dag.scaled(alpha), gamma, &target, opts.certify_tol);
        prop_assert!(ok, "scaled round trip error {:?}", err);
    }
}

#[test]
fn gain_bound_coefficient_grows_with_closed_loop_radius() {
    let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap();
    let mut last = (0.0, 0.0);
    for a in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let sys = LinearSystem::new(mat(&[&[a]]), mat(&[&[1.0]]), mat(&[&[1.0]]), 0.0).unwrap();
        let b = perturbation_bounds(&sys, &cost, 0.9).unwrap();
        assert!(b.rho_ac > last.0, "rho {} after {}", b.rho_ac, last.0);
        assert!(b.composite.gain_d > last.1, "gain coefficient {} after {}", b.composite.gain_d, last.1);
        last = (b.rho_ac, b.composite.gain_d);
    }
}

#[test]
fn feasibility_verdict_agrees_with_synthesis_on_scalar_targets() {
    let sys = LinearSystem::new(mat(&[&[1.1]]), mat(&[&[1.0]]), mat(&[&[1.0]]), 0.0).unwrap();
    let cost = CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap();
    let e = DMatrix::identity(1, 1);
    let mut seen = (0, 0);
    for i in 0..15 {
        let k = -2.05 + 0.13 * i as f64;
        let target = Policy::new(mat(&[&[k]]), DVector::from_element(1, 0.3)).unwrap();
        let rep = feasibility_check(&sys, &e, 0.9, &target, 256).unwrap();
        let optimal = match synthesize(&sys, &cost, 0.9, &target, &AttackOptions::default()) {
            Ok(sol) => sol.status == SolveStatus::Optimal && sol.certified,
            Err(Error::Infeasible(_)) => false,
            Err(e) => panic!("gain {k}: {e}"),
        };
        if rep.cond2_min_eig_over_grid.abs() < 10.0 * FEASIBILITY_TOL || rep.verdict == Verdict::Inconclusive {
            continue;
        }
        assert_eq!(rep.verdict == Verdict::FeasibleEvidence, optimal, "gain {k}: {rep:?}");
        if optimal {
            seen.0 += 1;
        } else {
            seen.1 += 1;
        }
    }
    assert!(seen.0 > 0 && seen.1 > 0, "{seen:?}");
}

#[test]
fn value_and_q_function_match_monte_carlo_rollouts() {
    let sys = LinearSystem::new(mat(&[&[0.9, 0.2], &[0.0, 1.05]]), mat(&[&[0.0], &[1.0]]), DMatrix::identity(2, 2), 0.3).unwrap();
    let cost = CostParams::new(DMatrix::identity(2, 2), mat(&[&[0.5]]), DVector::from_row_slice(&[0.4, -0.2]), 0.1).unwrap();
    let gamma = 0.8;
    let (pi, value) = dlqg(&sys, &cost, gamma).unwrap();
    let q = q_matrix(&sys, &cost, gamma, &value).unwrap();
    let x0 = DVector::from_row_slice(&[1.0, -0.5]);
    let u0 = DVector::from_element(1, 0.7);

    let horizon = 120;
    let runs = 4000;
    let mut g = rng(11);
    let (mut v_sum, mut v_sq, mut q_sum, mut q_sq) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..runs {
        for first in [None, Some(&u0)] {
            let mut x = x0.clone();
            let mut total = 0.0;
            let mut discount = 1.0;
            for t in 0..horizon {
                let u = match (t, first) {
                    (0, Some(u)) => u.clone(),
                    _ => pi.act(&x),
                };
                total += discount * cost.evaluate(&x, &u);
                discount *= gamma;
                x = &sys.a * &x + &sys.b * &u + &sys.c * gaussian_vec(&mut g, 2) * sys.noise_std;
            }
            if first.is_some() {
                q_sum += total;
                q_sq += total * total;
            } else {
                v_sum += total;
                v_sq += total * total;
            }
        }
    }
    let n = runs as f64;
    for (sum, sq, exact) in [(v_sum, v_sq, value.evaluate(&x0)), (q_sum, q_sq, q.evaluate(&x0, &u0))] {
        let mean = sum / n;
        let se = ((sq / n - mean * mean) / n).sqrt();
        assert!((mean - exact).abs() < 4.0 * se + 1e-6, "mean {mean} exact {exact} se {se}");
    }
}
