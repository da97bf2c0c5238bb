use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CostChannel, LinearSystem, Policy};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, vector};

/// One step `(x_t, u_t, c_t, x_{t+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(with = "vector")]
    pub x: DVector<f64>,
    #[serde(with = "vector")]
    pub u: DVector<f64>,
    pub c: f64,
    #[serde(with = "vector")]
    pub x_next: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// Set when the state norm crossed the blow-up threshold; `steps` stops just before that step.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.steps.last().map(|s| &s.x_next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub blowup: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { blowup: 1e6 }
    }
}

/// Draws `C w` with `w ~ N(0, sigma^2 I)`.
pub(crate) fn process_noise<R: Rng>(sys: &LinearSystem, rng: &mut R) -> DVector<f64> {
    let w = DVector::from_fn(sys.q(), |_, _| rng.sample::<f64, _>(StandardNormal) * sys.noise_std);
    &sys.c * w
}

/// Rolls the plant forward under an arbitrary control law.
pub(crate) fn rollout<C, F>(
    sys: &LinearSystem,
    channel: &C,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut ChaCha8Rng,
    opts: &SimOptions,
    mut control: F,
) -> Result<Trajectory>
where
    C: CostChannel + ?Sized,
    F: FnMut(&DVector<f64>, &mut ChaCha8Rng) -> DVector<f64>,
{
    sys.validate()?;
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!("x0 has length {}, system has n = {}", x0.len(), sys.n())));
    }
    let mut out = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        let u = control(&x, rng);
        if u.len() != sys.m() {
            return Err(Error::Dimension(format!("control has length {}, system has m = {}", u.len(), sys.m())));
        }
        let noise = process_noise(sys, rng);
        let x_next = &sys.a * &x + &sys.b * &u + noise;
        if !(x_next.norm() <= opts.blowup) {
            log::warn!("state norm exceeded {:e} after {} steps; trajectory truncated", opts.blowup, out.len());
            return Ok(Trajectory { steps: out, diverged: true });
        }
        let c = channel.cost(&x, &u);
        out.push(Transition { x: x.clone(), u, c, x_next: x_next.clone() });
        x = x_next;
    }
    Ok(Trajectory { steps: out, diverged: false })
}

/// Closed-loop rollout under `u = Kx + k`, deterministic given `seed`.
pub fn simulate<C: CostChannel + ?Sized>(
    sys: &LinearSystem,
    policy: &Policy,
    channel: &C,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    policy.check_against(sys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(sys, channel, x0, steps, &mut rng, opts, |x, _| policy.act(x))
}

/// CSV with header `t, x_1..x_n, u_1..u_m, c`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = io::csv_writer(path)?;
    let Some(first) = traj.steps.first() else {
        w.write_record(["t", "c"])?;
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    header.extend((1..=first.x.len()).map(|i| format!("x_{i}")));
    header.extend((1..=first.u.len()).map(|i| format!("u_{i}")));
    header.push("c".into());
    w.write_record(&header)?;
    for (t, s) in traj.steps.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(s.x.iter().map(|v| fmt_f64(*v)));
        row.extend(s.u.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(s.c));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
