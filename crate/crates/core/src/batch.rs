//! Batch (offline) learning from transition data: least-squares system
//! identification, a constrained least-squares cost fit, certainty-equivalent
//! planning, and the attacker that rewrites the cost column.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{add_optimality_rows, certify, declare_blocks, AttackTarget, EPS_STRICT};
use crate::conic::{self, upper, BlockId, BlockKind, BlockValue, ConicProblem, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, mat, vector};
use crate::linalg;
use crate::lqg::simulate::rollout;
use crate::lqg::{bar_features, dlqg, halfvec_len, halfvec_to_sym, CostChannel, CostParams, LinearSystem, Policy, SimOptions};

pub use crate::lqg::Transition;

/// How controls are chosen while collecting data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlLaw {
    /// Independent uniform draws on `[low, high]` per input channel.
    Uniform { low: f64, high: f64 },
    /// `u = Kx + k + e`, `e ~ N(0, probe_std^2 I)`.
    Policy { policy: Policy, probe_std: f64 },
}

impl Default for ControlLaw {
    fn default() -> Self {
        ControlLaw::Uniform { low: -1.0, high: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub control: ControlLaw,
    #[serde(with = "vector")]
    pub x0: DVector<f64>,
    pub steps: usize,
    pub noise_std: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self.transitions.first().ok_or_else(|| Error::Parameter("dataset is empty".into()))?;
        let (n, m) = (first.x.len(), first.u.len());
        if self.transitions.iter().any(|t| t.x.len() != n || t.u.len() != m || t.x_next.len() != n) {
            return Err(Error::Dimension("transitions have inconsistent dimensions".into()));
        }
        Ok((n, m))
    }

    pub fn costs(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.transitions.iter().map(|t| t.c))
    }

    /// Same transitions with the cost column replaced.
    pub fn with_costs(&self, costs: &[f64]) -> Result<Dataset> {
        if costs.len() != self.len() {
            return Err(Error::Dimension(format!("{} costs for {} transitions", costs.len(), self.len())));
        }
        let mut out = self.clone();
        for (t, c) in out.transitions.iter_mut().zip(costs) {
            t.c = *c;
        }
        Ok(out)
    }
}

pub fn generate_dataset<C: CostChannel + ?Sized>(
    sys: &LinearSystem,
    channel: &C,
    steps: usize,
    control: &ControlLaw,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Dataset> {
    if steps == 0 {
        return Err(Error::Parameter("a dataset needs at least one step".into()));
    }
    let m = sys.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = match control {
        ControlLaw::Uniform { low, high } => {
            if !(low < high) {
                return Err(Error::Parameter(format!("empty control box [{low}, {high}]")));
            }
            rollout(sys, channel, x0, steps, &mut rng, &SimOptions::default(), |_, r| {
                DVector::from_fn(m, |_, _| r.random_range(*low..*high))
            })?
        }
        ControlLaw::Policy { policy, probe_std } => {
            policy.check_against(sys)?;
            rollout(sys, channel, x0, steps, &mut rng, &SimOptions::default(), |x, r| {
                policy.act(x) + DVector::from_fn(m, |_, _| r.sample::<f64, _>(StandardNormal) * probe_std)
            })?
        }
    };
    if traj.is_empty() {
        return Err(Error::Parameter("the rollout diverged before the first transition".into()));
    }
    Ok(Dataset {
        meta: DatasetMeta {
            seed,
            control: control.clone(),
            x0: x0.clone(),
            steps: traj.len(),
            noise_std: sys.noise_std,
            diverged: traj.diverged,
        },
        transitions: traj.steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsFit {
    #[serde(rename = "A_hat", with = "mat")]
    pub a_hat: DMatrix<f64>,
    #[serde(rename = "B_hat", with = "mat")]
    pub b_hat: DMatrix<f64>,
    pub residual_rms: f64,
    /// Condition number of `Z'Z`.
    pub condition: f64,
}

/// Least-squares `[A B]` from `x_{t+1} ~ A x_t + B u_t`.
pub fn fit_dynamics(ds: &Dataset) -> Result<DynamicsFit> {
    let (n, m) = ds.dims()?;
    let t = ds.len();
    let z = DMatrix::from_fn(t, n + m, |i, j| {
        let tr = &ds.transitions[i];
        if j < n {
            tr.x[j]
        } else {
            tr.u[j - n]
        }
    });
    let x = DMatrix::from_fn(t, n, |i, j| ds.transitions[i].x_next[j]);
    let rank = linalg::rank(&z);
    if rank < n + m {
        return Err(Error::RankDeficient(format!("Z'Z is singular: regressors have rank {rank} < {}", n + m)));
    }
    let ztz = z.transpose() * &z;
    let sv = ztz.clone().singular_values();
    let condition = sv.max() / sv.min();
    let theta = ztz.cholesky().ok_or_else(|| Error::RankDeficient("Z'Z is not positive definite".into()))?.solve(&(z.transpose() * &x));
    let ab = theta.transpose();
    let resid = &z * &theta - &x;
    Ok(DynamicsFit {
        a_hat: ab.columns(0, n).into_owned(),
        b_hat: ab.columns(n, m).into_owned(),
        residual_rms: (resid.norm_squared() / (t * n) as f64).sqrt(),
        condition,
    })
}

/// Row `[bar(x)', bar(u)', x', 1]` of the cost regression.
pub fn cost_features(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let bx = bar_features(x);
    let bu = bar_features(u);
    let mut out = Vec::with_capacity(bx.len() + bu.len() + x.len() + 1);
    out.extend(bx.iter());
    out.extend(bu.iter());
    out.extend(x.iter());
    out.push(1.0);
    DVector::from_vec(out)
}

/// Stacks `(Theta(D), Theta(E), d, r)` in the column order of [`cost_features`].
pub fn cost_theta(cost: &CostParams) -> DVector<f64> {
    let mut out = upper(&cost.d_mat).as_slice().to_vec();
    out.extend(upper(&cost.e_mat).iter());
    out.extend(cost.d_vec.iter());
    out.push(cost.r);
    DVector::from_vec(out)
}

pub fn cost_from_theta(theta: &DVector<f64>, n: usize, m: usize) -> Result<CostParams> {
    let (pd, pe) = (halfvec_len(n), halfvec_len(m));
    if theta.len() != pd + pe + n + 1 {
        return Err(Error::Dimension("cost parameter vector has the wrong length".into()));
    }
    Ok(CostParams {
        d_mat: halfvec_to_sym(&theta.rows(0, pd).into_owned(), n)?,
        e_mat: halfvec_to_sym(&theta.rows(pd, pe).into_owned(), m)?,
        d_vec: theta.rows(pd + pe, n).into_owned(),
        r: theta[pd + pe + n],
    })
}

/// Upper-triangular factor of the feature matrix and the unconstrained fit.
struct Regression {
    r: DMatrix<f64>,
    theta_ls: DVector<f64>,
    features: DMatrix<f64>,
}

fn regression(ds: &Dataset, costs: &DVector<f64>) -> Result<Regression> {
    let rows: Vec<DVector<f64>> = ds.transitions.iter().map(|t| cost_features(&t.x, &t.u)).collect();
    let p = rows[0].len();
    let h = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let rank = linalg::rank(&h);
    if rank < p {
        return Err(Error::RankDeficient(format!("cost feature matrix has rank {rank} < {p} columns")));
    }
    let qr = h.clone().qr();
    let r = qr.r();
    let qtc = qr.q().transpose() * costs;
    let theta_ls = r.solve_upper_triangular(&qtc).ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    Ok(Regression { r, theta_ls, features: h })
}

/// Block handles of the cost-fit part of a program.
#[derive(Debug, Clone, Copy)]
struct FitBlocks {
    d_mat: BlockId,
    e_mat: BlockId,
    d_vec: BlockId,
    r: BlockId,
    y: BlockId,
}

/// Adds `y = R theta(D, E, d, r)` and the distance `||y - R theta_ls||`.
fn add_fit(prob: &mut ConicProblem, d_mat: BlockId, e_mat: BlockId, d_vec: BlockId, reg: &Regression) -> Result<FitBlocks> {
    let r = prob.add_block("r", BlockKind::Scalar);
    let y = prob.add_block("y", BlockKind::Vector { n: reg.r.nrows() });
    let fb = FitBlocks { d_mat, e_mat, d_vec, r, y };
    prob.add_distance(y, &BlockValue::Vector { value: &reg.r * &reg.theta_ls }, 1.0)?;
    let rmat = reg.r.clone();
    prob.add_equalities(move |v| {
        let mut theta = upper(&v.matrix(fb.d_mat)).as_slice().to_vec();
        theta.extend(upper(&v.matrix(fb.e_mat)).iter());
        theta.extend(v.vector(fb.d_vec).iter());
        theta.push(v.scalar(fb.r));
        v.vector(fb.y) - &rmat * DVector::from_vec(theta)
    })?;
    Ok(fb)
}

fn start_point(prob: &ConicProblem, fb: &FitBlocks, reg: &Regression, n: usize, m: usize) -> Result<DVector<f64>> {
    let guess = cost_from_theta(&reg.theta_ls, n, m)?;
    let mut x = DVector::zeros(prob.dim());
    prob.set(&mut x, fb.d_mat, &BlockValue::Symmetric { value: guess.d_mat })?;
    prob.set(&mut x, fb.e_mat, &BlockValue::Symmetric { value: guess.e_mat })?;
    prob.set(&mut x, fb.d_vec, &BlockValue::Vector { value: guess.d_vec })?;
    prob.set(&mut x, fb.r, &BlockValue::Scalar { value: guess.r })?;
    prob.set(&mut x, fb.y, &BlockValue::Vector { value: &reg.r * &reg.theta_ls })?;
    Ok(x)
}

fn read_cost(sol: &conic::ConicSolution, eps_strict: f64) -> Result<CostParams> {
    Ok(CostParams {
        d_mat: linalg::clip_eigenvalues(&sol.matrix("D")?, 0.0),
        e_mat: linalg::clip_eigenvalues(&sol.matrix("E")?, eps_strict),
        d_vec: sol.vector("d")?,
        r: sol.scalar("r")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    pub cost: CostParams,
    pub residual_rms: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

pub fn build_cost_fit_problem(ds: &Dataset, eps_strict: f64) -> Result<ConicProblem> {
    let (n, m) = ds.dims()?;
    let reg = regression(ds, &ds.costs())?;
    let mut prob = ConicProblem::new();
    let d_mat = prob.add_block("D", BlockKind::Symmetric { n });
    let e_mat = prob.add_block("E", BlockKind::Symmetric { n: m });
    let d_vec = prob.add_block("d", BlockKind::Vector { n });
    prob.add_psd(d_mat, 0.0)?;
    prob.add_psd(e_mat, eps_strict)?;
    add_fit(&mut prob, d_mat, e_mat, d_vec, &reg)?;
    Ok(prob)
}

/// Least-squares fit of `(D, E, d, r)` to the cost column with `D >= 0`, `E >= eps_strict I`.
pub fn fit_cost(ds: &Dataset, eps_strict: f64, solver: &SolverOptions) -> Result<CostFit> {
    let (n, m) = ds.dims()?;
    let costs = ds.costs();
    let reg = regression(ds, &costs)?;
    let prob = build_cost_fit_problem(ds, eps_strict)?;
    let fb = FitBlocks {
        d_mat: BlockId(0),
        e_mat: BlockId(1),
        d_vec: BlockId(2),
        r: prob.find("r").expect("declared"),
        y: prob.find("y").expect("declared"),
    };
    let x0 = start_point(&prob, &fb, &reg, n, m)?;
    let sol = conic::solve_from(&prob, solver, Some(&x0))?;
    if sol.status == SolveStatus::InfeasibleDetected {
        return Err(Error::Infeasible("cost fit reported infeasible".into()));
    }
    let cost = read_cost(&sol, eps_strict)?;
    let resid = &reg.features * cost_theta(&cost) - &costs;
    Ok(CostFit { cost, residual_rms: resid.norm() / (costs.len() as f64).sqrt(), status: sol.status, iterations: sol.iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEstimates {
    pub dynamics: DynamicsFit,
    pub cost: CostFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub estimates: BatchEstimates,
    pub policy: Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchOptions {
    pub eps_strict: f64,
    pub solver: SolverOptions,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { eps_strict: EPS_STRICT, solver: SolverOptions::default() }
    }
}

/// Certainty-equivalent learner: identify, fit the cost, then plan.
pub fn batch_learn(ds: &Dataset, gamma: f64, opts: &BatchOptions) -> Result<BatchResult> {
    let dynamics = fit_dynamics(ds)?;
    let cost = fit_cost(ds, opts.eps_strict, &opts.solver)?;
    let sys = LinearSystem::new(
        dynamics.a_hat.clone(),
        dynamics.b_hat.clone(),
        DMatrix::identity(dynamics.a_hat.nrows(), dynamics.a_hat.nrows()),
        0.0,
    )?;
    if !linalg::is_controllable(&sys.a, &sys.b) {
        return Err(Error::Parameter("estimated (A, B) is not controllable".into()));
    }
    let (policy, _) = dlqg(&sys, &cost.cost, gamma)?;
    Ok(BatchResult { estimates: BatchEstimates { dynamics, cost }, policy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonedDataset {
    pub base: Dataset,
    pub c_dag: Vec<f64>,
    pub cost_dag: CostParams,
    /// `||c' - c|| / ||c||`
    pub relative_falsification: f64,
    /// `||c' - c||`
    pub falsification: f64,
    pub dynamics: DynamicsFit,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Whether the falsified parameters make the target optimal for the estimated dynamics.
    pub certified: bool,
}

impl PoisonedDataset {
    pub fn poisoned(&self) -> Dataset {
        self.base.with_costs(&self.c_dag).expect("lengths agree by construction")
    }
}

pub fn build_batch_attack_problem(
    ds: &Dataset,
    gamma: f64,
    target: &AttackTarget,
    dynamics: &DynamicsFit,
    eps_strict: f64,
) -> Result<ConicProblem> {
    let (n, m) = ds.dims()?;
    let reg = regression(ds, &ds.costs())?;
    let mut prob = ConicProblem::new();
    let blocks = declare_blocks(&mut prob, n, m, eps_strict)?;
    add_fit(&mut prob, blocks.d_mat, blocks.e_mat, blocks.d_vec, &reg)?;
    add_optimality_rows(&mut prob, &blocks, &dynamics.a_hat, &dynamics.b_hat, gamma, target)?;
    Ok(prob)
}

/// Rewrites the cost column so that the batch learner plans `target`, changing the costs as little as possible.
pub fn batch_attack(ds: &Dataset, gamma: f64, target: &AttackTarget, opts: &BatchOptions) -> Result<PoisonedDataset> {
    let (n, m) = ds.dims()?;
    let dynamics = fit_dynamics(ds)?;
    let est = LinearSystem::new(dynamics.a_hat.clone(), dynamics.b_hat.clone(), DMatrix::identity(n, n), 0.0)?;
    target.ensure_stabilizing(&est)?;

    let costs = ds.costs();
    let reg = regression(ds, &costs)?;
    let prob = build_batch_attack_problem(ds, gamma, target, &dynamics, opts.eps_strict)?;
    let fb = FitBlocks {
        d_mat: prob.find("D").expect("declared"),
        e_mat: prob.find("E").expect("declared"),
        d_vec: prob.find("d").expect("declared"),
        r: prob.find("r").expect("declared"),
        y: prob.find("y").expect("declared"),
    };
    let x0 = start_point(&prob, &fb, &reg, n, m)?;
    let sol = conic::solve_from(&prob, &opts.solver, Some(&x0))?;
    if sol.status == SolveStatus::InfeasibleDetected {
        return Err(Error::Infeasible("no cost falsification makes the target optimal for the estimated dynamics".into()));
    }
    let cost_dag = read_cost(&sol, opts.eps_strict)?;
    let c_dag: Vec<f64> = ds.transitions.iter().map(|t| crate::attack::falsified_cost(&cost_dag, &t.x, &t.u)).collect();
    let diff = DVector::from_column_slice(&c_dag) - &costs;
    let (_, _, certified) = certify(&est, &cost_dag, gamma, target, crate::attack::CERTIFY_TOL);
    Ok(PoisonedDataset {
        base: ds.clone(),
        falsification: diff.norm(),
        relative_falsification: diff.norm() / costs.norm(),
        c_dag,
        cost_dag,
        dynamics,
        status: sol.status,
        iterations: sol.iterations,
        certified,
    })
}

/// CSV with header `t, x_*, u_*, c, x_next_*` and, when given, a trailing `c_dagger` column.
pub fn write_dataset_csv(path: &Path, ds: &Dataset, c_dag: Option<&[f64]>) -> Result<()> {
    let (n, m) = ds.dims()?;
    let mut w = io::csv_writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.push("c".into());
    header.extend((1..=n).map(|i| format!("x_next_{i}")));
    if c_dag.is_some() {
        header.push("c_dagger".into());
    }
    w.write_record(&header)?;
    for (t, tr) in ds.transitions.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(tr.x.iter().map(|v| fmt_f64(*v)));
        row.extend(tr.u.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(tr.c));
        row.extend(tr.x_next.iter().map(|v| fmt_f64(*v)));
        if let Some(cd) = c_dag {
            row.push(fmt_f64(cd[t]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV; returns the transitions and the `c_dagger` column if present.
pub fn read_dataset_csv(path: &Path) -> Result<(Vec<Transition>, Option<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
            .map(|(i, _)| i)
            .collect()
    };
    let (xs, us, xn) = (cols("x_"), cols("u_"), cols("x_next_"));
    let c = header.iter().position(|h| h == "c").ok_or_else(|| Error::Config("dataset CSV lacks a c column".into()))?;
    let cd = header.iter().position(|h| h == "c_dagger");
    let mut out = Vec::new();
    let mut dag = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num =
            |i: usize| -> Result<f64> { rec[i].trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {:?}: {e}", &rec[i]))) };
        let pick = |idx: &[usize]| -> Result<DVector<f64>> { Ok(DVector::from_vec(idx.iter().map(|&i| num(i)).collect::<Result<_>>()?)) };
        out.push(Transition { x: pick(&xs)?, u: pick(&us)?, c: num(c)?, x_next: pick(&xn)? });
        if let Some(i) = cd {
            dag.push(num(i)?);
        }
    }
    Ok((out, cd.map(|_| dag)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;
    use crate::lqg::features::theta_halfvec;

    fn small_system(sigma: f64) -> LinearSystem {
        LinearSystem::new(mat(&[&[0.9, 0.2], &[0.0, 0.7]]), mat(&[&[0.0], &[1.0]]), DMatrix::identity(2, 2), sigma).unwrap()
    }

    fn small_cost() -> CostParams {
        CostParams::new(mat(&[&[2.0, 0.3], &[0.3, 1.0]]), mat(&[&[0.7]]), DVector::from_row_slice(&[0.2, -0.1]), 0.5).unwrap()
    }

    #[test]
    fn theta_ordering_matches_features() {
        let c = small_cost();
        let x = DVector::from_row_slice(&[0.4, -1.3]);
        let u = DVector::from_row_slice(&[0.8]);
        assert!((cost_features(&x, &u).dot(&cost_theta(&c)) - c.evaluate(&x, &u)).abs() < 1e-14);
        assert_eq!(upper(&c.d_mat), theta_halfvec(&c.d_mat).unwrap());
        let back = cost_from_theta(&cost_theta(&c), 2, 1).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn single_step_dataset() {
        let ds = generate_dataset(&small_system(0.0), &small_cost(), 1, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 0.0]), 3)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.meta.steps, 1);
    }

    #[test]
    fn zero_control_costs_follow_closed_form() {
        let sys = small_system(0.0);
        let cost = small_cost();
        let law = ControlLaw::Policy { policy: Policy::zeros(1, 2), probe_std: 0.0 };
        let x0 = DVector::from_row_slice(&[1.0, -2.0]);
        let ds = generate_dataset(&sys, &cost, 10, &law, &x0, 0).unwrap();
        let mut x = x0;
        for tr in &ds.transitions {
            let expect = (x.transpose() * &cost.d_mat * &x)[(0, 0)] + cost.d_vec.dot(&x) + cost.r;
            assert!((tr.c - expect).abs() < 1e-14);
            x = &sys.a * x;
        }
    }

    #[test]
    fn noiseless_identification_is_exact() {
        let sys = small_system(0.0);
        let ds = generate_dataset(&sys, &small_cost(), 30, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 5).unwrap();
        let fit = fit_dynamics(&ds).unwrap();
        assert!((&fit.a_hat - &sys.a).amax() < 1e-8);
        assert!((&fit.b_hat - &sys.b).amax() < 1e-8);
    }

    #[test]
    fn identification_matches_pseudo_inverse_and_ignores_order() {
        let ds = generate_dataset(&small_system(0.1), &small_cost(), 60, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 9)
            .unwrap();
        let fit = fit_dynamics(&ds).unwrap();
        let z = DMatrix::from_fn(60, 3, |i, j| if j < 2 { ds.transitions[i].x[j] } else { ds.transitions[i].u[0] });
        let x = DMatrix::from_fn(60, 2, |i, j| ds.transitions[i].x_next[j]);
        let oracle = (linalg::pinv(&z) * x).transpose();
        assert!((fit.a_hat.clone() - oracle.columns(0, 2)).amax() < 1e-10);
        assert!((fit.b_hat.clone() - oracle.columns(2, 1)).amax() < 1e-10);

        let mut shuffled = ds.clone();
        shuffled.transitions.reverse();
        shuffled.transitions.swap(3, 40);
        let fit2 = fit_dynamics(&shuffled).unwrap();
        assert!((fit2.a_hat - fit.a_hat).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_regressors_rejected() {
        let law = ControlLaw::Policy { policy: Policy::zeros(1, 2), probe_std: 0.0 };
        let ds = generate_dataset(&small_system(0.0), &small_cost(), 20, &law, &DVector::from_row_slice(&[1.0, 1.0]), 0).unwrap();
        assert!(matches!(fit_dynamics(&ds), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn interior_cost_recovered_exactly() {
        let cost = small_cost();
        let ds = generate_dataset(&small_system(0.1), &cost, 80, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 2).unwrap();
        let fit = fit_cost(&ds, EPS_STRICT, &SolverOptions::default()).unwrap();
        assert_eq!(fit.status, SolveStatus::Optimal);
        assert!((cost_theta(&fit.cost) - cost_theta(&cost)).amax() < 1e-6);
    }

    #[test]
    fn indefinite_fit_is_projected_into_the_cone() {
        // Costs from an indefinite D: the constrained fit must return a PSD estimate
        // that agrees with a long reference solve.
        let mut cost = small_cost();
        cost.d_mat = mat(&[&[1.0, 0.0], &[0.0, -0.5]]);
        let ds = generate_dataset(&small_system(0.1), &cost, 80, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 4).unwrap();
        let fit = fit_cost(&ds, EPS_STRICT, &SolverOptions::default()).unwrap();
        assert_eq!(fit.status, SolveStatus::Optimal);
        assert!(linalg::min_eigenvalue(&fit.cost.d_mat) >= 0.0);
        let long = SolverOptions { tol_primal: 1e-12, tol_dual: 1e-12, max_iters: 1_000_000, ..Default::default() };
        let reference = fit_cost(&ds, EPS_STRICT, &long).unwrap();
        assert!((cost_theta(&fit.cost) - cost_theta(&reference.cost)).amax() < 1e-6);
    }

    #[test]
    fn exact_data_reproduces_exact_policy() {
        let sys = small_system(0.0);
        let cost = small_cost();
        let ds = generate_dataset(&sys, &cost, 80, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 6).unwrap();
        let learned = batch_learn(&ds, 0.9, &BatchOptions::default()).unwrap();
        let (truth, _) = dlqg(&sys, &cost, 0.9).unwrap();
        assert!(learned.policy.max_abs_diff(&truth) < 1e-8);
    }

    #[test]
    fn self_target_leaves_costs_alone() {
        let sys = small_system(0.05);
        let cost = small_cost();
        let ds = generate_dataset(&sys, &cost, 80, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 8).unwrap();
        let learned = batch_learn(&ds, 0.9, &BatchOptions::default()).unwrap();
        let pois = batch_attack(&ds, 0.9, &learned.policy, &BatchOptions::default()).unwrap();
        assert!(pois.relative_falsification < 1e-6, "{}", pois.relative_falsification);
    }

    #[test]
    fn offset_attack_is_consistent_and_round_trips() {
        let sys = small_system(0.05);
        let cost = small_cost();
        let ds = generate_dataset(&sys, &cost, 120, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 12).unwrap();
        let opts = BatchOptions::default();
        let clean = batch_learn(&ds, 0.9, &opts).unwrap();
        let target = Policy::new(clean.policy.gain.clone(), DVector::from_row_slice(&[0.4])).unwrap();
        let pois = batch_attack(&ds, 0.9, &target, &opts).unwrap();
        assert_eq!(pois.status, SolveStatus::Optimal);
        assert!(pois.certified);
        for (t, cd) in ds.transitions.iter().zip(&pois.c_dag) {
            assert!((pois.cost_dag.evaluate(&t.x, &t.u) - cd).abs() <= 1e-12);
        }
        let poisoned = pois.poisoned();
        for (a, b) in poisoned.transitions.iter().zip(&ds.transitions) {
            assert_eq!((&a.x, &a.u, &a.x_next), (&b.x, &b.u, &b.x_next));
        }
        let relearned = batch_learn(&poisoned, 0.9, &opts).unwrap();
        assert!(relearned.policy.max_abs_diff(&target) < 1e-2);
        assert!(pois.relative_falsification > 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_dataset(&small_system(0.1), &small_cost(), 5, &ControlLaw::default(), &DVector::from_row_slice(&[1.0, 1.0]), 1)
            .unwrap();
        let dir = std::env::temp_dir().join(format!("lqg-deceive-batch-{}", std::process::id()));
        let path = dir.join("ds.csv");
        let cd: Vec<f64> = ds.transitions.iter().map(|t| t.c + 1.0).collect();
        write_dataset_csv(&path, &ds, Some(&cd)).unwrap();
        let (tr, dag) = read_dataset_csv(&path).unwrap();
        assert_eq!(tr, ds.transitions);
        assert_eq!(dag.unwrap(), cd);
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "t,x_1,x_2,u_1,c,x_next_1,x_next_2,c_dagger");
        std::fs::remove_dir_all(dir).ok();
    }
}
