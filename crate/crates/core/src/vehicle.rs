//! The 3-D point-mass vehicle benchmark: position/velocity state, acceleration
//! input, and the reference numbers the experiments are checked against.

use nalgebra::{DMatrix, DVector};

use crate::linalg::mat;
use crate::lqg::{CostParams, LinearSystem, Policy};

pub const GAMMA: f64 = 0.9;
pub const NOISE_STD: f64 = 0.1;
pub const DT: f64 = 0.1;
pub const DAMPING: f64 = 0.95;
/// Position `(1, 1, 0.5)`, velocity `(-1, -0.5, -1)`.
pub const X0: [f64; 6] = [1.0, 1.0, 0.5, -1.0, -0.5, -1.0];

pub fn system() -> LinearSystem {
    let i3 = DMatrix::<f64>::identity(3, 3);
    let mut a = DMatrix::zeros(6, 6);
    a.view_mut((0, 0), (3, 3)).copy_from(&i3);
    a.view_mut((0, 3), (3, 3)).copy_from(&(&i3 * DT));
    a.view_mut((3, 3), (3, 3)).copy_from(&(&i3 * DAMPING));
    let mut b = DMatrix::zeros(6, 3);
    b.view_mut((3, 0), (3, 3)).copy_from(&(&i3 * DT));
    LinearSystem { a, b, c: DMatrix::identity(6, 6), noise_std: NOISE_STD }
}

pub fn cost() -> CostParams {
    CostParams { d_mat: DMatrix::identity(6, 6), e_mat: DMatrix::identity(3, 3) * 0.5, d_vec: DVector::zeros(6), r: 0.0 }
}

pub fn x0() -> DVector<f64> {
    DVector::from_row_slice(&X0)
}

/// Gain `[p I, v I]` with offset `k`.
fn block_gain(p: f64, v: f64, k: [f64; 3]) -> Policy {
    let mut gain = DMatrix::zeros(3, 6);
    for i in 0..3 {
        gain[(i, i)] = p;
        gain[(i, i + 3)] = v;
    }
    Policy { gain, offset: DVector::from_row_slice(&k) }
}

/// Target that parks the vehicle at `(1, 0, -1)` with zero velocity.
pub fn target() -> Policy {
    block_gain(-0.5316, -0.97, [0.5316, 0.0, -0.5316])
}

/// Initial policy for the online learner. The printed gain has the opposite
/// sign convention (`rho(A + B K) = 1.104`); its negation is stabilizing.
pub fn initial_policy() -> Policy {
    Policy {
        gain: -mat(&[&[0.03, 0.0, 0.0, -0.1, 0.0, 0.0], &[0.0, 0.56, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.5, 0.0, 0.0, 1.0]]),
        offset: DVector::zeros(3),
    }
}

/// Published reference numbers for the benchmark.
pub mod reference {
    use super::*;

    pub fn optimal_policy() -> Policy {
        block_gain(-0.5316, -0.97, [0.0; 3])
    }

    pub const ATTACK_OBJECTIVE: f64 = 1.8137;

    /// Falsified state weight (four printed decimals).
    pub fn falsified_d_mat() -> DMatrix<f64> {
        mat(&[
            &[0.7163, 0.0, 0.2837, -0.1218, 0.0, 0.1218],
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            &[0.2837, 0.0, 0.7163, 0.1218, 0.0, -0.1218],
            &[-0.1218, 0.0, 0.1218, 0.5687, 0.0, 0.4313],
            &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            &[0.1218, 0.0, -0.1219, 0.4313, 0.0, 0.5687],
        ])
    }

    /// Falsified linear state weight. The fourth entry is printed as `-1.6084`,
    /// which breaks the mirror symmetry with the sixth entry; `-0.1608` is used.
    pub fn falsified_d_vec() -> DVector<f64> {
        DVector::from_row_slice(&[-0.1448, 0.0, 0.1448, -0.1608, 0.0, 0.1608])
    }

    /// Falsified input weight. The `(3, 1)` entry is printed as `2.095`; the
    /// matrix is symmetric, so `0.2096` is used.
    pub fn falsified_e_mat() -> DMatrix<f64> {
        mat(&[&[0.2904, 0.0, 0.2096], &[0.0, 0.5, 0.0], &[0.2096, 0.0, 0.2904]])
    }

    pub fn falsified_cost() -> CostParams {
        CostParams { d_mat: falsified_d_mat(), e_mat: falsified_e_mat(), d_vec: falsified_d_vec(), r: 0.0 }
    }

    /// Offsets learned by the batch learner from poisoned data.
    pub const BATCH_POISONED_OFFSET: [f64; 3] = [0.5812, -0.0382, -0.5310];
    pub const BATCH_RELATIVE_FALSIFICATION: f64 = 2.2107 / 96.2731;
    /// `|c' - c| <= a |x|^2 + b |u|^2 + c |x|`
    pub const ENVELOPE: [f64; 3] = [1.088, 0.419, 0.3060];
    pub const ADP_POISONED_OFFSET: [f64; 3] = [0.5229, 0.0076, -0.5144];
    pub const ADP_UPDATES: usize = 22;
}
