//! Lipschitz-type bounds on how far the optimal policy moves when the cost
//! parameters are perturbed, plus a randomized harness that checks them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, spectral_norm};
use crate::lqg::{dlqg, CostParams, LinearSystem};

pub const TAU_K_MAX: usize = 1000;
pub const TAU_SETTLE_WINDOW: usize = 25;
/// Absolute slack on each inequality, covering the Riccati solver tolerance.
pub const VERIFY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau {
    pub value: f64,
    /// False when the ratio never settled within `k_max` powers; `value` is then the running sup.
    pub settled: bool,
    pub powers: usize,
}

/// `sup_k ||M^k|| / rho(M)^k`, truncated once the ratio stops growing.
pub fn tau(m: &DMatrix<f64>, k_max: usize, settle_window: usize) -> Result<Tau> {
    if !m.is_square() {
        return Err(Error::Dimension("tau needs a square matrix".into()));
    }
    let rho = linalg::spectral_radius(m);
    if rho <= 1e-12 {
        return Err(Error::TauUndefined);
    }
    let scaled = m / rho;
    let mut power = DMatrix::identity(m.nrows(), m.ncols());
    let mut sup = 1.0_f64;
    let mut prev = 1.0_f64;
    let mut quiet = 0;
    for k in 1..=k_max {
        power = &power * &scaled;
        let ratio = spectral_norm(&power);
        sup = sup.max(ratio);
        quiet = if ratio <= prev * (1.0 + 1e-12) { quiet + 1 } else { 0 };
        prev = ratio;
        if quiet >= settle_window {
            return Ok(Tau { value: sup, settled: true, powers: k });
        }
    }
    log::info!("tau did not settle within {k_max} powers; returning running sup {sup:e}");
    Ok(Tau { value: sup, settled: false, powers: k_max })
}

/// A bound coefficient that may be undefined for the given parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Value(f64),
    /// The closed form divides by a non-positive quantity.
    Inapplicable,
}

impl Coefficient {
    pub fn value(self) -> Option<f64> {
        match self {
            Coefficient::Value(v) => Some(v),
            Coefficient::Inapplicable => None,
        }
    }

    fn map(self, f: impl FnOnce(f64) -> f64) -> Self {
        match self {
            Coefficient::Value(v) => Coefficient::Value(f(v)),
            Coefficient::Inapplicable => Coefficient::Inapplicable,
        }
    }

    /// `coef * x`, treating `0 * inapplicable` as zero.
    pub fn times(self, x: f64) -> Option<f64> {
        match self {
            Coefficient::Value(v) => Some(v * x),
            Coefficient::Inapplicable if x == 0.0 => Some(0.0),
            Coefficient::Inapplicable => None,
        }
    }
}

impl Serialize for Coefficient {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Coefficient::Value(v) => s.serialize_f64(*v),
            Coefficient::Inapplicable => s.serialize_str("inapplicable"),
        }
    }
}

impl<'de> Deserialize<'de> for Coefficient {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Coefficient::Value(v)),
            Raw::Text(t) if t == "inapplicable" => Ok(Coefficient::Inapplicable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected coefficient {t:?}"))),
        }
    }
}

/// Coefficients of the combined policy-deviation bound
/// `|dK| <= gain_d |dD| + gain_e |dE|` and
/// `|dk| <= offset_d |dD| + offset_e |dE| + offset_dvec |dd|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeCoefficients {
    pub gain_d: f64,
    pub gain_e: Coefficient,
    pub offset_d: f64,
    pub offset_e: Coefficient,
    pub offset_dvec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBounds {
    pub gamma1: f64,
    pub gamma2: Coefficient,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub gamma6: f64,
    pub gamma7: f64,
    pub gamma8: f64,
    pub gamma9: f64,
    /// Radius under which the Riccati perturbation bound is proved.
    pub eps_ceiling: Coefficient,
    /// `min(eps_ceiling, lambda_min(E) / 2)`, or just the second term when the ceiling is inapplicable.
    pub eps_max: f64,
    pub rho_ac: f64,
    pub tau_ac: f64,
    pub tau_settled: bool,
    pub norm_e_inv: f64,
    pub lambda_min_e: f64,
    pub composite: CompositeCoefficients,
}

impl PerturbationBounds {
    /// Right-hand sides `(gain bound, offset bound)` for perturbation sizes
    /// `(|dD|, |dE|, |dd|)`; `None` when an inapplicable coefficient is needed.
    pub fn evaluate(&self, dd: f64, de: f64, dv: f64) -> (Option<f64>, Option<f64>) {
        let c = &self.composite;
        let gain = c.gain_e.times(de).map(|t| c.gain_d * dd + t);
        let offset = c.offset_e.times(de).map(|t| c.offset_d * dd + t + c.offset_dvec * dv);
        (gain, offset)
    }
}

pub fn perturbation_bounds(sys: &LinearSystem, cost: &CostParams, gamma: f64) -> Result<PerturbationBounds> {
    let (pi, value) = dlqg(sys, cost, gamma)?;
    let ac = sys.closed_loop(&pi.gain);
    let rho = linalg::spectral_radius(&ac);
    let t = tau(&ac, TAU_K_MAX, TAU_SETTLE_WINDOW)?;
    let tau_v = t.value;

    let na = spectral_norm(&sys.a);
    let nb = spectral_norm(&sys.b);
    let np = spectral_norm(&value.p);
    let nk = spectral_norm(&pi.gain);
    let nkv = pi.offset.norm();
    let ndv = cost.d_vec.norm();
    let e_inv = linalg::inverse(&cost.e_mat, "E")?;
    let ne_inv = spectral_norm(&e_inv);
    let lam = linalg::min_eigenvalue(&cost.e_mat);
    let n = sys.n();
    let resolvent = linalg::inverse(&(DMatrix::identity(n, n) - &ac * gamma), "I - gamma Ac")?;
    let nres = spectral_norm(&resolvent);
    let s = &sys.b * &e_inv * sys.b.transpose();

    let g1 = 4.0 * gamma * gamma * tau_v * tau_v / (1.0 - gamma * rho * rho);
    let shared = na * na * (np + 1.0).powi(2) * ne_inv * ne_inv * nb * nb;
    let margin = 1.0 - ne_inv;
    let (g2, ceiling) = if margin > 0.0 {
        let cap = ((1.0 - gamma * rho * rho) / (gamma * gamma * tau_v * spectral_norm(&ac) * spectral_norm(&s))).min(1.0);
        (
            Coefficient::Value(g1 * shared / margin),
            Coefficient::Value(g1 * margin * cap * ne_inv * ne_inv * nb * nb / (na * na * (np + 1.0).powi(2))),
        )
    } else {
        (Coefficient::Inapplicable, Coefficient::Inapplicable)
    };
    let g3 = 2.0 * gamma / lam * na.max(nb).powi(2) * (nk + 1.0);
    let g4 = 2.0 * gamma / lam * nk;
    let g5 = 2.0 * nres;
    let g6 = 2.0 * gamma * nres * ndv * nb;
    let g7 = 4.0 * nkv / lam;
    let g8 = 4.0 * gamma * nkv * nb * nb / lam;
    let g9 = 4.0 * gamma * nb / lam;

    let composite = CompositeCoefficients {
        gain_d: g3 * g1,
        gain_e: g2.map(|v| g3 * v + g4),
        offset_d: g1 * g8 + g1 * g3 * g6 * g9,
        offset_e: g2.map(|v| g7 + v * g8 + (g4 + v * g3) * g6 * g9),
        offset_dvec: g5 * g9,
    };
    let eps_max = match ceiling {
        Coefficient::Value(c) => c.min(lam / 2.0),
        Coefficient::Inapplicable => lam / 2.0,
    };
    Ok(PerturbationBounds {
        gamma1: g1,
        gamma2: g2,
        gamma3: g3,
        gamma4: g4,
        gamma5: g5,
        gamma6: g6,
        gamma7: g7,
        gamma8: g8,
        gamma9: g9,
        eps_ceiling: ceiling,
        eps_max,
        rho_ac: rho,
        tau_ac: tau_v,
        tau_settled: t.settled,
        norm_e_inv: ne_inv,
        lambda_min_e: lam,
        composite,
    })
}

/// Which cost parameters the harness perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbMode {
    pub d_mat: bool,
    pub e_mat: bool,
    pub d_vec: bool,
}

impl PerturbMode {
    pub const ALL: PerturbMode = PerturbMode { d_mat: true, e_mat: true, d_vec: true };
    /// Leaves `E` alone, so the bounds stay applicable even when `|E^-1| >= 1`.
    pub const STATE_ONLY: PerturbMode = PerturbMode { d_mat: true, e_mat: false, d_vec: true };
    pub const LINEAR_ONLY: PerturbMode = PerturbMode { d_mat: false, e_mat: false, d_vec: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub eps: f64,
    pub mode: PerturbMode,
    pub violations: usize,
    /// Trials whose bound needed an inapplicable coefficient; they cannot be checked.
    pub vacuous: usize,
    /// Draws rejected because a perturbed weight lost definiteness.
    pub resampled: usize,
    pub max_ratio: f64,
    pub max_ratio_gain: f64,
    pub max_ratio_offset: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Trial {
    violation: bool,
    vacuous: bool,
    resampled: usize,
    ratio_gain: f64,
    ratio_offset: f64,
}

/// Symmetric matrix with spectral norm exactly `eps`.
pub fn random_symmetric<R: Rng>(rng: &mut R, n: usize, eps: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = linalg::symmetrize(&g);
    let norm = spectral_norm(&s);
    if norm == 0.0 {
        return DMatrix::zeros(n, n);
    }
    s * (eps / norm)
}

/// Vector uniform on the sphere of radius `eps`.
pub fn random_sphere<R: Rng>(rng: &mut R, n: usize, eps: f64) -> DVector<f64> {
    let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = g.norm();
    if norm == 0.0 {
        return DVector::zeros(n);
    }
    g * (eps / norm)
}

const MAX_RESAMPLES: usize = 1000;

/// Draws `n_trials` perturbations of size `eps`, re-solves exactly, and checks both bounds.
pub fn verify_bounds(
    sys: &LinearSystem,
    cost: &CostParams,
    gamma: f64,
    n_trials: usize,
    eps: f64,
    seed: u64,
    mode: PerturbMode,
) -> Result<VerifyReport> {
    let bounds = perturbation_bounds(sys, cost, gamma)?;
    if !(eps >= 0.0) || eps > bounds.eps_max {
        return Err(Error::Parameter(format!("eps = {eps:e} is outside [0, eps_max = {:e}]", bounds.eps_max)));
    }
    let (pi0, _) = dlqg(sys, cost, gamma)?;
    let (n, m) = (sys.n(), sys.m());

    let trials: Vec<Trial> = (0..n_trials)
        .into_par_iter()
        .map(|i| -> Result<Trial> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut out = Trial::default();
            for _ in 0..MAX_RESAMPLES {
                let mut pert = cost.clone();
                if mode.d_mat {
                    pert.d_mat += random_symmetric(&mut rng, n, eps);
                }
                if mode.e_mat {
                    pert.e_mat += random_symmetric(&mut rng, m, eps);
                }
                if mode.d_vec {
                    pert.d_vec += random_sphere(&mut rng, n, eps);
                }
                if linalg::min_eigenvalue(&pert.d_mat) < -linalg::PSD_TOL || linalg::min_eigenvalue(&pert.e_mat) <= 0.0 {
                    out.resampled += 1;
                    continue;
                }
                let (pi, _) = match dlqg(sys, &pert, gamma) {
                    Ok(r) => r,
                    Err(Error::Parameter(_)) | Err(Error::NotPositiveDefinite(_)) => {
                        out.resampled += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let dd = spectral_norm(&(&pert.d_mat - &cost.d_mat));
                let de = spectral_norm(&(&pert.e_mat - &cost.e_mat));
                let dv = (&pert.d_vec - &cost.d_vec).norm();
                let dk = spectral_norm(&(&pi.gain - &pi0.gain));
                let dkv = (&pi.offset - &pi0.offset).norm();
                match bounds.evaluate(dd, de, dv) {
                    (Some(bg), Some(bo)) => {
                        out.violation = dk > bg + VERIFY_SLACK || dkv > bo + VERIFY_SLACK;
                        out.ratio_gain = ratio(dk, bg);
                        out.ratio_offset = ratio(dkv, bo);
                    }
                    _ => out.vacuous = true,
                }
                return Ok(out);
            }
            Err(Error::Parameter(format!("could not draw an admissible perturbation in {MAX_RESAMPLES} attempts")))
        })
        .collect::<Result<_>>()?;

    let max_ratio_gain = trials.iter().map(|t| t.ratio_gain).fold(0.0, f64::max);
    let max_ratio_offset = trials.iter().map(|t| t.ratio_offset).fold(0.0, f64::max);
    Ok(VerifyReport {
        trials: n_trials,
        eps,
        mode,
        violations: trials.iter().filter(|t| t.violation).count(),
        vacuous: trials.iter().filter(|t| t.vacuous).count(),
        resampled: trials.iter().map(|t| t.resampled).sum(),
        max_ratio: max_ratio_gain.max(max_ratio_offset),
        max_ratio_gain,
        max_ratio_offset,
    })
}

fn ratio(actual: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        actual / bound
    } else if actual <= VERIFY_SLACK {
        0.0
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;
    use crate::vehicle;

    #[test]
    fn tau_of_scalar_and_normal_matrices_is_one() {
        let t = tau(&mat(&[&[0.9]]), TAU_K_MAX, TAU_SETTLE_WINDOW).unwrap();
        assert!((t.value - 1.0).abs() < 1e-12 && t.settled);
        let t = tau(&(DMatrix::identity(3, 3) * 0.5), TAU_K_MAX, TAU_SETTLE_WINDOW).unwrap();
        assert!((t.value - 1.0).abs() < 1e-10);
        let rot = mat(&[&[0.0, -0.7], &[0.7, 0.0]]);
        assert!((tau(&rot, TAU_K_MAX, TAU_SETTLE_WINDOW).unwrap().value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tau_of_jordan_block_matches_brute_force() {
        let m = mat(&[&[0.5, 1.0], &[0.0, 0.5]]);
        let mut p = DMatrix::<f64>::identity(2, 2);
        let mut sup = 1.0_f64;
        for k in 1..=1000 {
            p = &p * &m;
            sup = sup.max(spectral_norm(&p) / 0.5_f64.powi(k));
        }
        let t = tau(&m, 1000, 25).unwrap();
        assert!(!t.settled);
        assert!((t.value - sup).abs() <= 1e-9 * sup, "{} vs {}", t.value, sup);
    }

    #[test]
    fn tau_of_transient_matrix() {
        // Non-normal but diagonalizable: the ratio rises then settles.
        let m = mat(&[&[0.5, 1.0], &[0.0, 0.4]]);
        let mut p = DMatrix::<f64>::identity(2, 2);
        let mut sup = 1.0_f64;
        for k in 1..=1000 {
            p = &p * &m;
            sup = sup.max(spectral_norm(&p) / 0.5_f64.powi(k));
        }
        let t = tau(&m, 1000, 25).unwrap();
        assert!(t.settled);
        assert!((t.value - sup).abs() < 1e-9 * sup);
    }

    #[test]
    fn tau_of_nilpotent_is_undefined() {
        assert!(matches!(tau(&mat(&[&[0.0, 1.0], &[0.0, 0.0]]), 1000, 25), Err(Error::TauUndefined)));
    }

    #[test]
    fn gamma4_scalar_hand_value() {
        // K* = -0.3 needs E = 1, gamma = 0.9: pick a so that the optimal gain is -0.3.
        // With b = 1, d = 1: solve for a via bisection on the optimal gain.
        let make = |a: f64| {
            (
                LinearSystem::new(mat(&[&[a]]), mat(&[&[1.0]]), mat(&[&[1.0]]), 0.0).unwrap(),
                CostParams::new(mat(&[&[1.0]]), mat(&[&[1.0]]), DVector::zeros(1), 0.0).unwrap(),
            )
        };
        let gain = |a: f64| {
            let (s, c) = make(a);
            dlqg(&s, &c, 0.9).unwrap().0.gain[(0, 0)]
        };
        let (mut lo, mut hi) = (0.01, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gain(mid) > -0.3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (s, c) = make(0.5 * (lo + hi));
        let b = perturbation_bounds(&s, &c, 0.9).unwrap();
        assert!((b.gamma4 - 0.54).abs() < 1e-9, "{}", b.gamma4);
    }

    #[test]
    fn gamma2_inapplicable_for_small_input_weight() {
        let b = perturbation_bounds(&vehicle::system(), &vehicle::cost(), vehicle::GAMMA).unwrap();
        assert_eq!(b.gamma2, Coefficient::Inapplicable);
        assert_eq!(b.eps_ceiling, Coefficient::Inapplicable);
        assert!((b.eps_max - 0.25).abs() < 1e-12);
        assert!(b.tau_ac >= 1.0 && b.rho_ac < 1.0);
        let json = serde_json::to_value(&b).unwrap();
        assert_eq!(json["gamma2"], "inapplicable");
        let back: PerturbationBounds = serde_json::from_value(json).unwrap();
        assert_eq!(back, b);
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * b.abs().max(1.0)
    }

    #[test]
    fn vehicle_coefficients_match_closed_form() {
        let b = perturbation_bounds(&vehicle::system(), &vehicle::cost(), vehicle::GAMMA).unwrap();
        let expect = [
            (b.rho_ac, 0.9358060518372234),
            (b.tau_ac, 8.290086928354373),
            (b.gamma1, 1051.125410044742),
            (b.gamma3, 8.07776187921196),
            (b.gamma4, 3.981894190514505),
            (b.gamma5, 18.107816470013702),
            (b.gamma9, 0.72),
            (b.composite.gain_d, 8490.740767530458),
            (b.composite.offset_dvec, 13.037627858409866),
        ];
        for (i, (got, want)) in expect.iter().enumerate() {
            assert!(close(*got, *want), "entry {i}: {got} vs {want}");
        }
        assert_eq!((b.gamma6, b.gamma7, b.gamma8), (0.0, 0.0, 0.0));
    }

    #[test]
    fn heavy_input_weight_coefficients_match_closed_form() {
        // Slowly rotating closed-loop spectrum: the settle rule stops on the
        // first downswing, and the reference applies the same truncation.
        let mut cost = vehicle::cost();
        cost.e_mat = DMatrix::identity(3, 3) * 2.0;
        cost.d_vec = DVector::from_row_slice(&[0.3, -0.2, 0.1, 0.0, 0.5, -0.4]);
        let b = perturbation_bounds(&vehicle::system(), &cost, vehicle::GAMMA).unwrap();
        let c = &b.composite;
        let expect = [
            (b.tau_ac, 10.958724060583831),
            (b.gamma1, 2205.6966547235183),
            (b.gamma2.value().unwrap(), 2456.930860863332),
            (b.gamma6, 1.3891606075324703),
            (b.gamma7, 0.11612473390422091),
            (b.gamma8, 0.0010451226051379884),
            (b.eps_ceiling.value().unwrap(), 0.012375952988124057),
            (c.gain_e.value().unwrap(), 3345.803836900106),
            (c.offset_d, 753.2866825979693),
            (c.offset_e.value().unwrap(), 839.2985190513257),
        ];
        for (i, (got, want)) in expect.iter().enumerate() {
            assert!(close(*got, *want), "entry {i}: {got} vs {want}");
        }
        assert!(close(b.eps_max, 0.012375952988124057));
    }

    #[test]
    fn zero_eps_has_zero_ratio() {
        let r = verify_bounds(&vehicle::system(), &vehicle::cost(), vehicle::GAMMA, 4, 0.0, 1, PerturbMode::ALL).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.vacuous, 0);
        assert_eq!(r.max_ratio, 0.0);
    }

    #[test]
    fn linear_only_leaves_gain_untouched() {
        let r = verify_bounds(&vehicle::system(), &vehicle::cost(), vehicle::GAMMA, 8, 1e-3, 3, PerturbMode::LINEAR_ONLY).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.max_ratio_gain, 0.0);
        assert!(r.max_ratio_offset > 0.0 && r.max_ratio_offset <= 1.0);
    }

    #[test]
    fn eps_above_limit_rejected() {
        let r = verify_bounds(&vehicle::system(), &vehicle::cost(), vehicle::GAMMA, 1, 0.3, 0, PerturbMode::ALL);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
