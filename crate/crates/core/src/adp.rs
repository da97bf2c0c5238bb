//! Online Q-function policy iteration with a recursive-least-squares inner
//! loop, and the attacker that feeds it a falsified cost signal.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackOptions, AttackSolution, AttackTarget};
use crate::conic::SolveStatus;
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, mat, vector};
use crate::lqg::simulate::process_noise;
use crate::lqg::{bar_features, halfvec_len, halfvec_to_sym, policy_improve, CostChannel, CostParams, LinearSystem, Policy, QMatrix};

/// Number of Q-function parameters for state dimension `n` and input dimension `m`.
pub fn theta_len(n: usize, m: usize) -> usize {
    halfvec_len(n + m + 1)
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len() + 1);
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z[x.len() + u.len()] = 1.0;
    z
}

/// `bar([x; u; 1]) - gamma bar([x'; K x' + k; 1])`
pub fn phi_features(x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>, policy: &Policy, gamma: f64) -> DVector<f64> {
    bar_features(&stack(x, u)) - bar_features(&stack(x_next, &policy.act(x_next))) * gamma
}

/// Recursive least squares with prior `theta ~ N(theta_0, beta I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    #[serde(with = "vector")]
    pub theta_hat: DVector<f64>,
    #[serde(rename = "S", with = "mat")]
    pub s: DMatrix<f64>,
    pub update_count: usize,
}

impl RlsState {
    pub fn new(theta: DVector<f64>, beta: f64) -> Self {
        let p = theta.len();
        RlsState { theta_hat: theta, s: DMatrix::identity(p, p) * beta, update_count: 0 }
    }

    /// Absorbs one observation `c ~ phi' theta`; returns the change in `theta_hat`.
    pub fn update(&mut self, phi: &DVector<f64>, c: f64) -> DVector<f64> {
        let sp = &self.s * phi;
        let denom = 1.0 + phi.dot(&sp);
        let delta = &sp * ((c - phi.dot(&self.theta_hat)) / denom);
        self.theta_hat += &delta;
        self.s -= &sp * sp.transpose() / denom;
        self.s = (&self.s + self.s.transpose()) * 0.5;
        self.update_count += 1;
        delta
    }
}

/// Functional form of [`RlsState::update`].
pub fn rls_update(state: &RlsState, phi: &DVector<f64>, c: f64) -> RlsState {
    let mut next = state.clone();
    next.update(phi, c);
    next
}

/// Ridge solution `(Phi'Phi + I/beta)^-1 (Phi'c + theta_0/beta)`, the batch counterpart of RLS.
pub fn ridge_solution(phis: &[DVector<f64>], costs: &[f64], theta0: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    let p = theta0.len();
    let mut gram = DMatrix::identity(p, p) / beta;
    let mut rhs = theta0 / beta;
    for (phi, c) in phis.iter().zip(costs) {
        gram.ger(1.0, phi, phi, 1.0);
        rhs.axpy(*c, phi, 1.0);
    }
    gram.cholesky().map(|ch| ch.solve(&rhs)).ok_or_else(|| Error::NotPositiveDefinite("ridge normal equations".into()))
}

/// Greedy policy of the Q-function encoded by `theta`.
pub fn policy_from_theta(theta: &DVector<f64>, n: usize, m: usize) -> Result<Policy> {
    let h = halfvec_to_sym(theta, n + m + 1)?;
    policy_improve(&QMatrix { h, n, m })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdpConfig {
    /// Prior scale, `S_0 = beta I`.
    pub beta: f64,
    /// Inner stop: `||theta(i) - theta(i-1)|| < eps1`.
    pub eps1: f64,
    /// Outer stop: `||K_z - K_{z-1}||_F + ||k_z - k_{z-1}|| < eps2`.
    pub eps2: f64,
    pub probe_std: f64,
    /// RLS updates before the inner stopping test is consulted.
    pub min_inner: usize,
    pub max_inner: usize,
    pub max_outer: usize,
    pub seed: u64,
    /// State norm at which the plant is reset to `x0`.
    pub blowup: f64,
    /// Resets tolerated before the run is aborted.
    pub max_resets: usize,
    /// Compare RLS against the batch ridge solution at the end of every inner loop.
    pub verify_rls: bool,
}

impl Default for AdpConfig {
    fn default() -> Self {
        AdpConfig {
            beta: 10.0,
            eps1: 1e-5,
            eps2: 1e-5,
            probe_std: 5.0,
            min_inner: 200,
            max_inner: 20_000,
            max_outer: 60,
            seed: 0,
            blowup: 1e6,
            max_resets: 10,
            verify_rls: false,
        }
    }
}

impl AdpConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("beta", self.beta), ("eps1", self.eps1), ("eps2", self.eps2), ("blowup", self.blowup)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
        if !(self.probe_std >= 0.0) {
            return Err(Error::Parameter(format!("probe_std must be >= 0, got {}", self.probe_std)));
        }
        if self.max_inner == 0 || self.max_outer == 0 || self.min_inner > self.max_inner {
            return Err(Error::Parameter("need 0 < min_inner <= max_inner and max_outer > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostLogEntry {
    pub outer_z: usize,
    pub inner_i: usize,
    pub t: usize,
    pub c: f64,
    /// Cost the learner received, when it differs from the true cost.
    pub c_dagger: Option<f64>,
    pub x_norm: f64,
    pub u_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdpTrace {
    /// `(K_0, k_0), (K_1, k_1), ...`
    pub policy_sequence: Vec<Policy>,
    pub inner_counts: Vec<usize>,
    /// `||K_z - K_{z-1}||_F + ||k_z - k_{z-1}||` per update.
    pub update_norms: Vec<f64>,
    pub cost_log: Vec<CostLogEntry>,
    pub resets: usize,
    pub converged: bool,
    /// Relative gap between RLS and the ridge oracle per outer step, when verification is on.
    pub rls_check: Vec<f64>,
}

impl AdpTrace {
    pub fn updates(&self) -> usize {
        self.policy_sequence.len().saturating_sub(1)
    }

    pub fn steps(&self) -> usize {
        self.cost_log.len()
    }

    /// CSV with header `outer_z, inner_i, t, c, c_dagger`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = io::csv_writer(path)?;
        w.write_record(["outer_z", "inner_i", "t", "c", "c_dagger"])?;
        for e in &self.cost_log {
            w.write_record([
                e.outer_z.to_string(),
                e.inner_i.to_string(),
                e.t.to_string(),
                fmt_f64(e.c),
                e.c_dagger.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON list of `{z, K, k}`.
    pub fn write_policies_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            z: usize,
            #[serde(flatten)]
            policy: &'a Policy,
        }
        let entries: Vec<Entry> = self.policy_sequence.iter().enumerate().map(|(z, policy)| Entry { z, policy }).collect();
        io::write_json(path, &entries)
    }
}

fn abort(reason: String, trace: AdpTrace) -> Error {
    Error::AdpAborted { reason, trace: Box::new(trace) }
}

fn run<C, T>(
    sys: &LinearSystem,
    observed: &C,
    truth: Option<&T>,
    gamma: f64,
    init: &Policy,
    x0: &DVector<f64>,
    cfg: &AdpConfig,
) -> Result<(Policy, AdpTrace)>
where
    C: CostChannel + ?Sized,
    T: CostChannel + ?Sized,
{
    cfg.validate()?;
    sys.validate()?;
    init.check_against(sys)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!("x0 has length {}, system has n = {}", x0.len(), sys.n())));
    }
    init.ensure_stabilizing(sys)?;
    let (n, m) = (sys.n(), sys.m());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = AdpTrace { policy_sequence: vec![init.clone()], ..Default::default() };
    let mut policy = init.clone();
    let mut theta = DVector::zeros(theta_len(n, m));
    let mut x = x0.clone();
    let mut t = 0;

    for z in 0..cfg.max_outer {
        let mut rls = RlsState::new(theta.clone(), cfg.beta);
        let mut samples: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut i = 0;
        loop {
            let probe = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal) * cfg.probe_std);
            let u = policy.act(&x) + probe;
            let c = observed.cost(&x, &u);
            let x_next = &sys.a * &x + &sys.b * &u + process_noise(sys, &mut rng);
            trace.cost_log.push(CostLogEntry {
                outer_z: z,
                inner_i: i,
                t,
                c: truth.map_or(c, |tr| tr.cost(&x, &u)),
                c_dagger: truth.map(|_| c),
                x_norm: x.norm(),
                u_norm: u.norm(),
            });
            let phi = phi_features(&x, &u, &x_next, &policy, gamma);
            let delta = rls.update(&phi, c);
            if cfg.verify_rls {
                samples.push((phi, c));
            }
            i += 1;
            t += 1;
            x = x_next;
            if !(x.norm() <= cfg.blowup) {
                trace.resets += 1;
                log::warn!("state norm exceeded {:e} at step {t}; resetting to x0 ({} resets)", cfg.blowup, trace.resets);
                if trace.resets > cfg.max_resets {
                    return Err(abort(format!("plant blew up {} times", trace.resets), trace));
                }
                x = x0.clone();
            }
            if !rls.theta_hat.iter().all(|v| v.is_finite()) {
                return Err(abort(format!("non-finite Q-function estimate at outer step {z}"), trace));
            }
            if (i >= cfg.min_inner && delta.norm() < cfg.eps1) || i >= cfg.max_inner {
                break;
            }
        }
        if i >= cfg.max_inner {
            log::warn!("inner loop {z} hit max_inner = {}", cfg.max_inner);
        }
        if cfg.verify_rls {
            let (phis, cs): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
            let oracle = ridge_solution(&phis, &cs, &theta, cfg.beta)?;
            trace.rls_check.push((&rls.theta_hat - &oracle).norm() / oracle.norm().max(1.0));
        }
        theta = rls.theta_hat;
        trace.inner_counts.push(i);
        let next = match policy_from_theta(&theta, n, m) {
            Ok(p) => p,
            Err(e) => return Err(abort(format!("policy update {} failed: {e}", z + 1), trace)),
        };
        let change = (&next.gain - &policy.gain).norm() + (&next.offset - &policy.offset).norm();
        log::debug!("outer {z}: {i} inner steps, policy change {change:.3e}");
        trace.update_norms.push(change);
        trace.policy_sequence.push(next.clone());
        policy = next;
        if change < cfg.eps2 {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!("ADP did not converge within {} outer steps", cfg.max_outer);
    }
    Ok((policy, trace))
}

/// Runs the learner against `channel`, starting from the stabilizing `init`.
pub fn adp_learn<C: CostChannel + ?Sized>(
    sys: &LinearSystem,
    channel: &C,
    gamma: f64,
    init: &Policy,
    x0: &DVector<f64>,
    cfg: &AdpConfig,
) -> Result<(Policy, AdpTrace)> {
    run::<C, CostParams>(sys, channel, None, gamma, init, x0, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdpAttackRun {
    pub policy: Policy,
    pub trace: AdpTrace,
    pub attack: AttackSolution,
}

/// Synthesizes the falsified cost for `target` and trains the learner on it.
#[allow(clippy::too_many_arguments)]
pub fn adp_attack_run(
    sys: &LinearSystem,
    cost: &CostParams,
    gamma: f64,
    target: &AttackTarget,
    init: &Policy,
    x0: &DVector<f64>,
    cfg: &AdpConfig,
    attack_opts: &AttackOptions,
) -> Result<AdpAttackRun> {
    let sol = attack::synthesize(sys, cost, gamma, target, attack_opts)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Infeasible(format!("cost falsification did not reach optimality ({:?})", sol.status)));
    }
    let cost_dag = sol.cost_dag.clone();
    let channel = move |x: &DVector<f64>, u: &DVector<f64>| attack::falsified_cost(&cost_dag, x, u);
    let (policy, trace) = run(sys, &channel, Some(cost), gamma, init, x0, cfg)?;
    Ok(AdpAttackRun { policy, trace, attack: sol })
}
