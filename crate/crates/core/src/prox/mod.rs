//! Tangent-space proximal subproblem.
//!
//! Given a point `X`, an ambient gradient estimate `v` and a step `γ > 0`,
//! finds
//!
//! ```text
//! ζ* = argmin_{ζ ∈ T_X M}  ⟨v, ζ⟩ + ‖ζ‖² / (2γ) + h(X + ζ)
//! ```
//!
//! For `h = 0` the solution is `−γ Proj_X(v)`. For the ℓ1 family the
//! problem is solved on its dual: with a multiplier `Λ` for the linear
//! tangent constraint,
//!
//! ```text
//! ζ(Λ) = prox_{γh}(X − γ(v − XΛ)) − X,     E(Λ) = ζ(Λ)ᵀX + Xᵀζ(Λ),
//! ```
//!
//! and a semi-smooth Newton method drives `E(Λ)` to zero. In Grassmann mode
//! the constraint is `Xᵀζ = 0` and `Λ` is a general `r × r` matrix.

pub mod oracle;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::manifold::{project_matrix, sym, Geometry, StiefelPoint, TangentVector};
use crate::{Error, Mat, Result};

/// Convex nonsmooth term `h`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum NonsmoothTerm {
    #[default]
    Zero,
    /// `weight · ‖X‖₁`
    L1 { weight: f64 },
    /// `weight · ‖P_Ω(X)‖₁` where `mask` marks the entries of `Ω`.
    MaskedL1 { weight: f64, mask: DMatrix<bool> },
}

impl NonsmoothTerm {
    pub fn l1(weight: f64) -> Self {
        NonsmoothTerm::L1 { weight }
    }

    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        match self {
            NonsmoothTerm::Zero => Ok(()),
            NonsmoothTerm::L1 { weight } | NonsmoothTerm::MaskedL1 { weight, .. }
                if !(*weight >= 0.0 && weight.is_finite()) =>
            {
                Err(Error::Parameter(format!("l1 weight must be finite and >= 0, got {weight}")))
            }
            NonsmoothTerm::MaskedL1 { mask, .. } if mask.shape() != shape => {
                Err(Error::dim(shape, mask.shape()))
            }
            _ => Ok(()),
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            NonsmoothTerm::Zero => 0.0,
            NonsmoothTerm::L1 { weight } | NonsmoothTerm::MaskedL1 { weight, .. } => *weight,
        }
    }

    /// True when `h` vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.weight() == 0.0
    }

    pub fn value(&self, x: &Mat) -> f64 {
        match self {
            NonsmoothTerm::Zero => 0.0,
            NonsmoothTerm::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            NonsmoothTerm::MaskedL1 { weight, mask } => {
                weight * x.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v.abs()).sum::<f64>()
            }
        }
    }

    /// `prox_{step·h}(a)`. Entries outside the mask pass through unchanged.
    pub fn prox(&self, a: &Mat, step: f64) -> Mat {
        match self {
            NonsmoothTerm::Zero => a.clone(),
            NonsmoothTerm::L1 { weight } => prox_l1(a, step * weight),
            NonsmoothTerm::MaskedL1 { weight, mask } => {
                let tau = step * weight;
                a.zip_map(mask, |v, m| if m { soft(v, tau) } else { v })
            }
        }
    }

    /// 0/1 generalized Jacobian of [`Self::prox`] at `a`. Ties `|a| = τ`
    /// count as active.
    fn prox_jacobian(&self, a: &Mat, step: f64) -> Mat {
        match self {
            NonsmoothTerm::Zero => Mat::from_element(a.nrows(), a.ncols(), 1.0),
            NonsmoothTerm::L1 { weight } => {
                let tau = step * weight;
                a.map(|v| if v.abs() >= tau { 1.0 } else { 0.0 })
            }
            NonsmoothTerm::MaskedL1 { weight, mask } => {
                let tau = step * weight;
                a.zip_map(mask, |v, m| if !m || v.abs() >= tau { 1.0 } else { 0.0 })
            }
        }
    }

    /// Element of `∂h(x)` with `sign(0) = 0`.
    pub fn subgradient(&self, x: &Mat) -> Mat {
        let sgn = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        match self {
            NonsmoothTerm::Zero => Mat::zeros(x.nrows(), x.ncols()),
            NonsmoothTerm::L1 { weight } => x.map(|v| weight * sgn(v)),
            NonsmoothTerm::MaskedL1 { weight, mask } => {
                x.zip_map(mask, |v, m| if m { weight * sgn(v) } else { 0.0 })
            }
        }
    }
}

#[inline]
fn soft(a: f64, tau: f64) -> f64 {
    if a > tau {
        a - tau
    } else if a < -tau {
        a + tau
    } else {
        0.0
    }
}

/// Entrywise soft-thresholding `sign(a)·max(|a| − τ, 0)`.
pub fn prox_l1(a: &Mat, tau: f64) -> Mat {
    a.map(|v| soft(v, tau))
}

/// Soft-thresholds the entries in `mask` and zeroes the rest.
pub fn prox_masked_l1(s: &Mat, tau: f64, mask: &DMatrix<bool>) -> Mat {
    s.zip_map(mask, |v, m| if m { soft(v, tau) } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubproblemOptions {
    /// Residual tolerance; `None` means `1e-8 · max(1, ‖v‖_F)`.
    pub tol: Option<f64>,
    pub max_iters: usize,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        Self { tol: None, max_iters: 100 }
    }
}

impl SubproblemOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol: Some(tol), ..Self::default() }
    }

    fn resolve_tol(&self, v: &Mat) -> f64 {
        self.tol.unwrap_or_else(|| 1e-8 * v.norm().max(1.0))
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemResult {
    pub zeta: TangentVector,
    /// Multiplier of the tangent constraint (symmetric in Stiefel mode).
    pub dual: Mat,
    pub kkt_residual: f64,
    pub inner_iters: usize,
    pub converged: bool,
}

/// Objective `⟨v, ζ⟩ + ‖ζ‖²/(2γ) + h(X + ζ)` of the subproblem.
pub fn subproblem_objective(x: &StiefelPoint, v: &Mat, gamma: f64, h: &NonsmoothTerm, zeta: &Mat) -> f64 {
    v.dot(zeta) + zeta.norm_squared() / (2.0 * gamma) + h.value(&(x.matrix() + zeta))
}

const CG_MAX_ITERS: usize = 100;
const LS_FACTOR: f64 = 0.5;
const LS_SUFFICIENT: f64 = 1e-4;
const LS_MAX_BACKTRACKS: usize = 30;

pub fn solve_subproblem(
    x: &StiefelPoint,
    v: &Mat,
    gamma: f64,
    h: &NonsmoothTerm,
    opts: &SubproblemOptions,
) -> Result<SubproblemResult> {
    if v.shape() != x.shape() {
        return Err(Error::dim(x.shape(), v.shape()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("proximal step must be > 0, got {gamma}")));
    }
    h.validate(x.shape())?;
    if v.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("non-finite gradient estimate".into()));
    }
    if h.is_zero() {
        return Ok(closed_form(x, v, gamma));
    }
    Ok(DualNewton::new(x, v, gamma, h).solve(opts.resolve_tol(v), opts.max_iters))
}

fn closed_form(x: &StiefelPoint, v: &Mat, gamma: f64) -> SubproblemResult {
    let zeta = project_matrix(x, v) * -gamma;
    let xtv = x.matrix().tr_mul(v);
    let dual = match x.geometry() {
        Geometry::Stiefel => sym(&xtv),
        Geometry::Grassmann => xtv,
    };
    SubproblemResult {
        zeta: TangentVector::new_unchecked(zeta, x),
        dual,
        kkt_residual: 0.0,
        inner_iters: 0,
        converged: true,
    }
}

/// Semi-smooth Newton on the dual residual map `E(Λ)`.
struct DualNewton<'a> {
    x: &'a StiefelPoint,
    v: &'a Mat,
    gamma: f64,
    h: &'a NonsmoothTerm,
    /// `X − γv`, the part of the prox argument that does not depend on `Λ`.
    shift: Mat,
}

struct Eval {
    lambda: Mat,
    /// Prox argument `X − γ(v − XΛ)`.
    arg: Mat,
    zeta: Mat,
    residual: Mat,
    res_sq: f64,
    /// Negated dual function; convex with gradient `κ·residual`.
    phi: f64,
}

impl<'a> DualNewton<'a> {
    fn new(x: &'a StiefelPoint, v: &'a Mat, gamma: f64, h: &'a NonsmoothTerm) -> Self {
        let shift = x.matrix() - v * gamma;
        Self { x, v, gamma, h, shift }
    }

    fn stiefel(&self) -> bool {
        self.x.geometry() == Geometry::Stiefel
    }

    /// Tangent-constraint map `C(Z)`: `ZᵀX + XᵀZ` or `XᵀZ`.
    fn constraint(&self, z: &Mat) -> Mat {
        let xtz = self.x.matrix().tr_mul(z);
        if self.stiefel() {
            &xtz + xtz.transpose()
        } else {
            xtz
        }
    }

    fn eval(&self, lambda: Mat) -> Eval {
        let arg = &self.shift + self.x.matrix() * &lambda * self.gamma;
        let zeta = self.h.prox(&arg, self.gamma) - self.x.matrix();
        let residual = self.constraint(&zeta);
        let res_sq = residual.norm_squared();
        let shifted = self.v - self.x.matrix() * &lambda;
        let dual = shifted.dot(&zeta) + zeta.norm_squared() / (2.0 * self.gamma) + self.h.value(&(self.x.matrix() + &zeta));
        Eval { lambda, arg, zeta, residual, res_sq, phi: -dual }
    }

    /// `∇φ = κ·E(Λ)`: the constraint map counts `XᵀZ` twice in Stiefel mode.
    fn kappa(&self) -> f64 {
        if self.stiefel() {
            0.5
        } else {
            1.0
        }
    }

    /// Generalized Jacobian of `E` applied to `Δ`.
    fn jacobian_apply(&self, weights: &Mat, delta: &Mat) -> Mat {
        let inner = (self.x.matrix() * delta).component_mul(weights);
        self.constraint(&inner) * self.gamma
    }

    fn initial_multiplier(&self) -> Mat {
        let g = self.v + self.h.subgradient(self.x.matrix());
        let xtg = self.x.matrix().tr_mul(&g);
        if self.stiefel() {
            sym(&xtg)
        } else {
            xtg
        }
    }

    /// Conjugate gradient on `(J + εI)Δ = rhs`.
    fn cg(&self, weights: &Mat, reg: f64, rhs: &Mat, tol: f64) -> Mat {
        let mut sol = Mat::zeros(rhs.nrows(), rhs.ncols());
        let mut res = rhs.clone();
        let mut dir = res.clone();
        let mut rr = res.norm_squared();
        for _ in 0..CG_MAX_ITERS {
            if rr.sqrt() <= tol {
                break;
            }
            let ad = self.jacobian_apply(weights, &dir) + &dir * reg;
            let curv = dir.dot(&ad);
            if curv <= 0.0 {
                break;
            }
            let alpha = rr / curv;
            sol += &dir * alpha;
            res -= ad * alpha;
            let rr_next = res.norm_squared();
            dir = &res + &dir * (rr_next / rr);
            rr = rr_next;
        }
        sol
    }

    /// Armijo backtracking on `φ`; `slope` is the directional derivative.
    fn line_search(&self, cur: &Eval, dir: &Mat, slope: f64) -> Option<Eval> {
        let slack = 16.0 * f64::EPSILON * cur.phi.abs().max(1.0);
        let mut step = 1.0;
        for _ in 0..LS_MAX_BACKTRACKS {
            let trial = self.eval(&cur.lambda + dir * step);
            if trial.phi.is_finite() && trial.phi <= cur.phi + LS_SUFFICIENT * step * slope + slack {
                return Some(trial);
            }
            step *= LS_FACTOR;
        }
        None
    }

    fn solve(&self, tol: f64, max_iters: usize) -> SubproblemResult {
        let mut cur = self.eval(self.initial_multiplier());
        let mut iters = 0;
        while iters < max_iters && cur.res_sq.sqrt() > tol {
            iters += 1;
            let res = cur.res_sq.sqrt();
            let weights = self.h.prox_jacobian(&cur.arg, self.gamma);
            let reg = self.gamma * res.min(1e-4);
            let forcing = res.min(0.1);
            let mut dir = self.cg(&weights, reg, &(-&cur.residual), forcing * res);
            let mut slope = self.kappa() * cur.residual.dot(&dir);
            if !(slope < 0.0) {
                // truncated CG lost descent; fall back to the dual gradient
                dir = -&cur.residual;
                slope = -self.kappa() * cur.res_sq;
            }
            match self.line_search(&cur, &dir, slope) {
                Some(e) => cur = e,
                None => break,
            }
        }
        self.finish(cur, iters, tol)
    }

    fn finish(&self, cur: Eval, iters: usize, tol: f64) -> SubproblemResult {
        let zeta = project_matrix(self.x, &cur.zeta);
        // subgradient picked by the prox: (arg − prox(arg)) / γ ∈ ∂h(X + ζ(Λ))
        let selected = (&cur.arg - (self.x.matrix() + &cur.zeta)) / self.gamma;
        let stationarity = project_matrix(self.x, &(self.v + &zeta / self.gamma + selected)).norm();
        let kkt_residual = cur.res_sq.sqrt() + stationarity;
        let converged = kkt_residual <= tol;
        if !converged {
            warn!(
                "subproblem stopped after {iters} Newton steps with KKT residual {kkt_residual:.3e} (tol {tol:.1e})"
            );
        }
        SubproblemResult {
            zeta: TangentVector::new_unchecked(zeta, self.x),
            dual: cur.lambda,
            kkt_residual,
            inner_iters: iters,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{gaussian_matrix, random_point, random_point_with, random_tangent_with};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_values() {
        let a = Mat::from_column_slice(1, 3, &[1.0, -0.2, -2.0]);
        let p = prox_l1(&a, 0.3);
        assert_abs_diff_eq!(p[(0, 0)], 0.7, epsilon = 1e-15);
        assert_eq!(p[(0, 1)], 0.0);
        assert_abs_diff_eq!(p[(0, 2)], -1.7, epsilon = 1e-15);
        assert_eq!(prox_l1(&a, 0.0), a);
    }

    #[test]
    fn masked_soft_threshold() {
        let s = Mat::from_row_slice(2, 2, &[2.0, -1.0, 0.3, 4.0]);
        let all = DMatrix::from_element(2, 2, true);
        assert_eq!(prox_masked_l1(&s, 0.5, &all), prox_l1(&s, 0.5));
        let mut single = DMatrix::from_element(2, 2, false);
        single[(0, 0)] = true;
        let out = prox_masked_l1(&s, 0.5, &single);
        assert_eq!(out, Mat::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.0]));
        let mut half = DMatrix::from_element(2, 2, false);
        half[(0, 1)] = true;
        half[(1, 1)] = true;
        assert_eq!(prox_masked_l1(&s, 0.0, &half), Mat::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 4.0]));
    }

    #[test]
    fn zero_term_uses_closed_form() {
        let x = random_point(7, 3, 1).unwrap();
        let v = gaussian_matrix(7, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let res = solve_subproblem(&x, &v, 0.3, &NonsmoothTerm::Zero, &Default::default()).unwrap();
        let expected = project_matrix(&x, &v) * -0.3;
        assert!((res.zeta.matrix() - expected).norm() <= 1e-12);
        assert_eq!(res.inner_iters, 0);
        assert_eq!(res.kkt_residual, 0.0);
        let doubled = solve_subproblem(&x, &(&v * 2.0), 0.3, &NonsmoothTerm::Zero, &Default::default()).unwrap();
        assert!((doubled.zeta.matrix() - res.zeta.matrix() * 2.0).norm() <= 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = random_point(4, 2, 1).unwrap();
        let v = Mat::zeros(4, 2);
        let h = NonsmoothTerm::l1(0.1);
        assert!(matches!(solve_subproblem(&x, &v, 0.0, &h, &Default::default()), Err(Error::Parameter(_))));
        assert!(matches!(solve_subproblem(&x, &Mat::zeros(4, 3), 1.0, &h, &Default::default()), Err(Error::Dimension(_))));
        assert!(matches!(
            solve_subproblem(&x, &v, 1.0, &NonsmoothTerm::l1(-1.0), &Default::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn interior_case_converges_quickly() {
        // pick a point with no small entries so the prox is affine nearby
        let mut seed = 0;
        let x = loop {
            let x = random_point(6, 2, seed).unwrap();
            if x.matrix().iter().all(|v| v.abs() > 0.05) {
                break x;
            }
            seed += 1;
        };
        let min_abs = x.matrix().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let gamma = 0.5;
        let mu = 0.5 * min_abs / gamma;
        let v = Mat::zeros(6, 2);
        let res = solve_subproblem(&x, &v, gamma, &NonsmoothTerm::l1(mu), &SubproblemOptions::with_tol(1e-10)).unwrap();
        assert!(res.converged);
        assert!(res.kkt_residual <= 1e-10);
        assert!(res.inner_iters <= 20);
        let oracle = oracle::solve_reference(&x, &v, gamma, &NonsmoothTerm::l1(mu), oracle::DEFAULT_ITERS);
        assert!((res.zeta.matrix() - oracle).norm() <= 1e-6);
    }

    #[test]
    fn matches_oracle_on_seeded_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = random_point_with(5, 2, Geometry::Stiefel, &mut rng).unwrap();
        let v = gaussian_matrix(5, 2, &mut rng);
        let h = NonsmoothTerm::l1(0.2);
        let res = solve_subproblem(&x, &v, 0.4, &h, &SubproblemOptions::with_tol(1e-10)).unwrap();
        assert!(res.converged, "kkt {}", res.kkt_residual);
        let reference = oracle::solve_reference(&x, &v, 0.4, &h, oracle::DEFAULT_ITERS);
        assert!((res.zeta.matrix() - reference).norm() <= 1e-6);
        assert!(res.zeta.tangency_error() <= 1e-8);
    }

    #[test]
    fn solution_is_locally_optimal_and_strongly_convex_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let x = random_point_with(8, 3, Geometry::Stiefel, &mut rng).unwrap();
            let v = gaussian_matrix(8, 3, &mut rng);
            let gamma = 0.7;
            let h = NonsmoothTerm::l1(0.3);
            let res = solve_subproblem(&x, &v, gamma, &h, &SubproblemOptions::with_tol(1e-11)).unwrap();
            assert!(res.converged);
            let z = res.zeta.matrix();
            let phi = subproblem_objective(&x, &v, gamma, &h, z);
            let phi0 = subproblem_objective(&x, &v, gamma, &h, &Mat::zeros(8, 3));
            assert!(phi0 >= phi + z.norm_squared() / (2.0 * gamma) - 1e-8);
            for _ in 0..50 {
                let d = random_tangent_with(&x, &mut rng).unwrap();
                let p = subproblem_objective(&x, &v, gamma, &h, &(z + d.matrix() * 1e-4));
                assert!(p >= phi - 1e-10);
            }
        }
    }

    #[test]
    fn grassmann_mode_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_point_with(6, 2, Geometry::Grassmann, &mut rng).unwrap();
        let v = gaussian_matrix(6, 2, &mut rng);
        let h = NonsmoothTerm::l1(0.15);
        let res = solve_subproblem(&x, &v, 0.5, &h, &SubproblemOptions::with_tol(1e-10)).unwrap();
        assert!(res.converged);
        assert!(x.matrix().tr_mul(res.zeta.matrix()).norm() <= 1e-9);
        let reference = oracle::solve_reference(&x, &v, 0.5, &h, oracle::DEFAULT_ITERS);
        assert!((res.zeta.matrix() - reference).norm() <= 1e-6);
    }

    #[test]
    fn masked_term_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_point_with(6, 2, Geometry::Stiefel, &mut rng).unwrap();
        let v = gaussian_matrix(6, 2, &mut rng);
        let mask = DMatrix::from_fn(6, 2, |i, j| (i + j) % 3 != 0);
        let h = NonsmoothTerm::MaskedL1 { weight: 0.4, mask };
        let res = solve_subproblem(&x, &v, 0.3, &h, &SubproblemOptions::with_tol(1e-10)).unwrap();
        assert!(res.converged);
        let reference = oracle::solve_reference(&x, &v, 0.3, &h, oracle::DEFAULT_ITERS);
        assert!((res.zeta.matrix() - reference).norm() <= 1e-6);
    }

    #[test]
    fn stationary_point_gives_zero_step() {
        // v = −∂h-compatible normal vector: X itself with zero ℓ1 weight is stationary
        let x = random_point(5, 2, 3).unwrap();
        let v = x.matrix() * sym(&gaussian_matrix(2, 2, &mut ChaCha8Rng::seed_from_u64(1)));
        let res = solve_subproblem(&x, &v, 1.0, &NonsmoothTerm::Zero, &Default::default()).unwrap();
        assert!(res.zeta.norm() <= 1e-14);
    }
}
