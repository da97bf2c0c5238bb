//! Exact discounted LQG machinery: plant and cost types, the Riccati solver,
//! the DLQG map from cost parameters to the optimal affine policy, Q-matrices,
//! policy improvement, trajectory simulation and the quadratic feature maps.

pub(crate) mod features;
mod policy;
mod riccati;
pub(crate) mod simulate;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{mat, vector};
use crate::linalg;

pub use features::{bar_features, halfvec_len, halfvec_to_sym, theta_halfvec};
pub use policy::{dlqg, dlqg_with, policy_evaluate, policy_improve, q_matrix};
pub use riccati::{riccati_residual, riccati_rhs, riccati_solve, riccati_solve_from, RiccatiOptions};
pub use simulate::{simulate, write_trajectory_csv, SimOptions, Trajectory, Transition};

/// Plant `x_{t+1} = A x_t + B u_t + C w_t` with `w_t ~ N(0, noise_std^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    #[serde(rename = "A", with = "mat")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "mat")]
    pub b: DMatrix<f64>,
    #[serde(rename = "C", with = "mat")]
    pub c: DMatrix<f64>,
    pub noise_std: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        let sys = LinearSystem { a, b, c, noise_std };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if !self.a.is_square() {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", n, self.a.ncols())));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm with m >= 1, got {}x{}", self.b.nrows(), self.b.ncols())));
        }
        if self.c.nrows() != n {
            return Err(Error::Dimension(format!("C must have {n} rows, got {}", self.c.nrows())));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Parameter(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.c.ncols()
    }

    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * gain
    }

    /// The same plant with `noise_std` replaced.
    pub fn with_noise(&self, noise_std: f64) -> Self {
        LinearSystem { noise_std, ..self.clone() }
    }
}

/// Stage cost `c(x, u) = x'Dx + d'x + r + u'Eu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    #[serde(rename = "D", with = "mat")]
    pub d_mat: DMatrix<f64>,
    #[serde(rename = "E", with = "mat")]
    pub e_mat: DMatrix<f64>,
    #[serde(rename = "d", with = "vector")]
    pub d_vec: DVector<f64>,
    pub r: f64,
}

impl CostParams {
    pub fn new(d_mat: DMatrix<f64>, e_mat: DMatrix<f64>, d_vec: DVector<f64>, r: f64) -> Result<Self> {
        let cost = CostParams { d_mat, e_mat, d_vec, r };
        cost.check_shape()?;
        Ok(cost)
    }

    /// Symmetry and dimension checks only; definiteness is checked by the solvers.
    pub fn check_shape(&self) -> Result<()> {
        linalg::ensure_symmetric(&self.d_mat, "D")?;
        linalg::ensure_symmetric(&self.e_mat, "E")?;
        if self.d_vec.len() != self.d_mat.nrows() {
            return Err(Error::Dimension(format!("d has length {}, D is {}x{}", self.d_vec.len(), self.d_mat.nrows(), self.d_mat.ncols())));
        }
        Ok(())
    }

    pub fn check_against(&self, sys: &LinearSystem) -> Result<()> {
        self.check_shape()?;
        if self.d_mat.nrows() != sys.n() || self.e_mat.nrows() != sys.m() {
            return Err(Error::Dimension(format!(
                "cost is (n={}, m={}) but system is (n={}, m={})",
                self.d_mat.nrows(),
                self.e_mat.nrows(),
                sys.n(),
                sys.m()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.d_mat * x)[(0, 0)] + self.d_vec.dot(x) + self.r + (u.transpose() * &self.e_mat * u)[(0, 0)]
    }

    /// `(alpha D, alpha E, alpha d, alpha r)`.
    pub fn scaled(&self, alpha: f64) -> Self {
        CostParams { d_mat: &self.d_mat * alpha, e_mat: &self.e_mat * alpha, d_vec: &self.d_vec * alpha, r: self.r * alpha }
    }
}

/// Anything that can produce the scalar cost the learner observes.
pub trait CostChannel {
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
}

impl CostChannel for CostParams {
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.evaluate(x, u)
    }
}

impl<F> CostChannel for F
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self(x, u)
    }
}

/// Affine state feedback `u = K x + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(rename = "K", with = "mat")]
    pub gain: DMatrix<f64>,
    #[serde(rename = "k", with = "vector")]
    pub offset: DVector<f64>,
}

impl Policy {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if gain.nrows() != offset.len() {
            return Err(Error::Dimension(format!("K has {} rows but k has length {}", gain.nrows(), offset.len())));
        }
        Ok(Policy { gain, offset })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Policy { gain: DMatrix::zeros(m, n), offset: DVector::zeros(m) }
    }

    pub fn act(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * x + &self.offset
    }

    pub fn check_against(&self, sys: &LinearSystem) -> Result<()> {
        if self.gain.nrows() != sys.m() || self.gain.ncols() != sys.n() || self.offset.len() != sys.m() {
            return Err(Error::Dimension(format!(
                "policy is {}x{} (+{}) but system needs {}x{}",
                self.gain.nrows(),
                self.gain.ncols(),
                self.offset.len(),
                sys.m(),
                sys.n()
            )));
        }
        Ok(())
    }

    pub fn closed_loop_radius(&self, sys: &LinearSystem) -> f64 {
        linalg::spectral_radius(&sys.closed_loop(&self.gain))
    }

    pub fn is_stabilizing(&self, sys: &LinearSystem) -> bool {
        self.closed_loop_radius(sys) < 1.0
    }

    pub fn ensure_stabilizing(&self, sys: &LinearSystem) -> Result<()> {
        self.check_against(sys)?;
        let rho = self.closed_loop_radius(sys);
        if rho < 1.0 {
            Ok(())
        } else {
            Err(Error::NotStabilizing(rho))
        }
    }

    /// Largest absolute entry difference over both `K` and `k`.
    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        (&self.gain - &other.gain).abs().max().max((&self.offset - &other.offset).abs().max())
    }
}

/// Value function `V(x) = x'Px + h'x + l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueQuad {
    #[serde(rename = "P", with = "mat")]
    pub p: DMatrix<f64>,
    #[serde(with = "vector")]
    pub h: DVector<f64>,
    pub l: f64,
}

impl ValueQuad {
    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)] + self.h.dot(x) + self.l
    }
}

/// Q-function matrix: `Q(x, u) = [x; u; 1]' H [x; u; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    #[serde(rename = "H", with = "mat")]
    pub h: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
}

impl QMatrix {
    pub fn new(h: DMatrix<f64>, n: usize, m: usize) -> Result<Self> {
        if h.nrows() != n + m + 1 {
            return Err(Error::Dimension(format!("H must be {0}x{0}, got {1}x{2}", n + m + 1, h.nrows(), h.ncols())));
        }
        linalg::ensure_symmetric(&h, "H")?;
        Ok(QMatrix { h, n, m })
    }

    pub fn hxx(&self) -> DMatrix<f64> {
        self.h.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn hxu(&self) -> DMatrix<f64> {
        self.h.view((0, self.n), (self.n, self.m)).into_owned()
    }

    pub fn hux(&self) -> DMatrix<f64> {
        self.h.view((self.n, 0), (self.m, self.n)).into_owned()
    }

    pub fn huu(&self) -> DMatrix<f64> {
        self.h.view((self.n, self.n), (self.m, self.m)).into_owned()
    }

    pub fn hx1(&self) -> DVector<f64> {
        self.h.view((0, self.n + self.m), (self.n, 1)).column(0).into_owned()
    }

    pub fn hu1(&self) -> DVector<f64> {
        self.h.view((self.n, self.n + self.m), (self.m, 1)).column(0).into_owned()
    }

    pub fn h11(&self) -> f64 {
        self.h[(self.n + self.m, self.n + self.m)]
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let z = augment(x, u);
        (z.transpose() * &self.h * &z)[(0, 0)]
    }
}

/// `[x; u; 1]`
pub fn augment(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len() + 1);
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z[x.len() + u.len()] = 1.0;
    z
}

/// Discount factor, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Discount(f64);

impl Discount {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(Discount(gamma))
        } else {
            Err(Error::Parameter(format!("discount must lie in (0, 1), got {gamma}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Discount {
    type Error = Error;

    fn try_from(g: f64) -> Result<Self> {
        Discount::new(g)
    }
}

impl From<Discount> for f64 {
    fn from(d: Discount) -> f64 {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub controllable: bool,
    pub observable: bool,
    pub b_full_rank: bool,
    pub a_invertible: bool,
}

impl AssumptionReport {
    /// Controllability plus observability, the conditions the Riccati solver relies on.
    pub fn solvable(&self) -> bool {
        self.controllable && self.observable
    }
}

pub fn check_assumptions(sys: &LinearSystem, cost: &CostParams) -> Result<AssumptionReport> {
    sys.validate()?;
    cost.check_against(sys)?;
    let d_half = linalg::sym_sqrt(&cost.d_mat);
    Ok(AssumptionReport {
        controllable: linalg::is_controllable(&sys.a, &sys.b),
        observable: linalg::is_observable(&sys.a, &d_half),
        b_full_rank: linalg::rank(&sys.b) == sys.m(),
        a_invertible: linalg::rank(&sys.a) == sys.n(),
    })
}
