//! Objectives `F(X) = f(X) + h(X)` with sampled access to `f`.
//!
//! `f` is treated as the mean of per-sample losses `f_i`; one call for one
//! sample's gradient is one IFO. The batch gradient is always the plain
//! sequential mean, so the full gradient and a full batch agree bit for bit.

mod robust_mc;
mod sparse_pca;

pub use robust_mc::{McSynthConfig, RobustMcProblem};
pub use sparse_pca::{SpcaSynthConfig, SparsePcaProblem};

use serde::{Deserialize, Serialize};

use crate::manifold::{Geometry, StiefelPoint};
use crate::prox::NonsmoothTerm;
use crate::{Error, Mat, Result};

/// Whether the full gradient may be formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    FiniteSum,
    /// Samples arrive as a stream: only sampled gradients are available.
    Online,
}

pub trait StochasticProblem {
    /// Shape `(d, r)` of the variable.
    fn shape(&self) -> (usize, usize);

    fn geometry(&self) -> Geometry {
        Geometry::Stiefel
    }

    /// Number of indexable samples.
    fn num_samples(&self) -> usize;

    fn mode(&self) -> SampleMode {
        SampleMode::FiniteSum
    }

    fn nonsmooth(&self) -> &NonsmoothTerm;

    /// Smooth part `f(X)`.
    fn smooth_loss(&self, x: &Mat) -> Result<f64>;

    /// Adds `Σ_{i ∈ indices} ∇f_i(X)` to `out`, in order.
    fn accumulate_gradient(&self, x: &Mat, indices: &[usize], out: &mut Mat) -> Result<()>;

    /// Hook run after every accepted outer step, for problems with
    /// auxiliary blocks updated in closed form.
    fn after_step(&mut self, _x: &StiefelPoint) -> Result<()> {
        Ok(())
    }

    fn loss(&self, x: &Mat) -> Result<f64> {
        Ok(self.smooth_loss(x)? + self.nonsmooth().value(x))
    }
}

/// Mean of the sample gradients over `indices`.
pub fn batch_gradient<P: StochasticProblem + ?Sized>(problem: &P, x: &Mat, indices: &[usize]) -> Result<Mat> {
    if indices.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let n = problem.num_samples();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Parameter(format!("sample index {bad} out of range 0..{n}")));
    }
    let (d, r) = problem.shape();
    if x.shape() != (d, r) {
        return Err(Error::dim((d, r), x.shape()));
    }
    let mut out = Mat::zeros(d, r);
    problem.accumulate_gradient(x, indices, &mut out)?;
    out /= indices.len() as f64;
    Ok(out)
}

/// `∇f(X)`; unavailable for online problems.
pub fn full_gradient<P: StochasticProblem + ?Sized>(problem: &P, x: &Mat) -> Result<Mat> {
    if problem.mode() == SampleMode::Online {
        return Err(Error::Unsupported("full gradient of an online problem".into()));
    }
    let all: Vec<usize> = (0..problem.num_samples()).collect();
    batch_gradient(problem, x, &all)
}
