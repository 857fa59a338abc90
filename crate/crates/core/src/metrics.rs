//! Evaluation quantities recorded along a run.

use serde::{Deserialize, Serialize};

use crate::manifold::{retract, RetractionKind, StiefelPoint};
use crate::problems::{full_gradient, SampleMode, StochasticProblem};
use crate::prox::{solve_subproblem, SubproblemOptions};
use crate::{Error, Mat, Result};

/// Entries larger than this in magnitude count as nonzero.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

/// One row of a run's trace. Metrics that were not computed are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub ifo: u64,
    pub loss: f64,
    pub zeta_norm: f64,
    pub est_err_sq: Option<f64>,
    pub g_norm: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// Which retraction argument the stationarity mapping uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GMappingVariant {
    /// `(X − Retr_X(ξ))/γ`.
    #[default]
    Standard,
    /// `(X − Retr_X(γξ))/γ`.
    GammaScaled,
}

/// Generalized proximal-gradient mapping at the full gradient, with its
/// Frobenius norm.
pub fn stationarity_g<P: StochasticProblem + ?Sized>(
    problem: &P,
    x: &StiefelPoint,
    gamma: f64,
    opts: &SubproblemOptions,
    kind: RetractionKind,
    variant: GMappingVariant,
) -> Result<(Mat, f64)> {
    let grad = full_gradient(problem, x.matrix())?;
    stationarity_g_at(problem, x, &grad, gamma, opts, kind, variant)
}

/// Same as [`stationarity_g`] with a precomputed gradient.
pub fn stationarity_g_at<P: StochasticProblem + ?Sized>(
    problem: &P,
    x: &StiefelPoint,
    grad: &Mat,
    gamma: f64,
    opts: &SubproblemOptions,
    kind: RetractionKind,
    variant: GMappingVariant,
) -> Result<(Mat, f64)> {
    let sol = solve_subproblem(x, grad, gamma, problem.nonsmooth(), opts)?;
    let step = match variant {
        GMappingVariant::Standard => sol.zeta,
        GMappingVariant::GammaScaled => sol.zeta.scaled(gamma),
    };
    let y = retract(x, &step, kind)?;
    let g = (x.matrix() - y.matrix()) / gamma;
    let n = g.norm();
    Ok((g, n))
}

/// `tr(XᵀAAᵀX) / tr(XXᵀ)` for a `d × n` data matrix `A`.
pub fn explained_variance(a: &Mat, x: &Mat) -> Result<f64> {
    if a.nrows() != x.nrows() {
        return Err(Error::Dimension(format!("data has {} rows but X has {}", a.nrows(), x.nrows())));
    }
    let atx = a.tr_mul(x);
    let denom = x.norm_squared();
    if denom == 0.0 {
        return Err(Error::Parameter("explained variance of a zero matrix".into()));
    }
    Ok(atx.norm_squared() / denom)
}

/// Number of entries with `|x_ij| > threshold`.
pub fn sparsity_count(x: &Mat, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("sparsity threshold must be > 0, got {threshold}")));
    }
    Ok(x.iter().filter(|v| v.abs() > threshold).count())
}

/// `‖v − ∇f(X)‖²`, or `None` for online problems.
pub fn estimator_error_sq<P: StochasticProblem + ?Sized>(problem: &P, x: &Mat, v: &Mat) -> Result<Option<f64>> {
    if problem.mode() == SampleMode::Online {
        return Ok(None);
    }
    let g = full_gradient(problem, x)?;
    if g.shape() != v.shape() {
        return Err(Error::dim(g.shape(), v.shape()));
    }
    Ok(Some((v - g).norm_squared()))
}
