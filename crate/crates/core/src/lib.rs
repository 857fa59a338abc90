//! Riemannian stochastic proximal gradient methods on the Stiefel manifold.
//!
//! The crate solves problems of the form `min f(X) + h(X)` over `St(d, r)`
//! where `f` is an expectation or finite sum of smooth losses and `h` is a
//! convex, possibly nonsmooth regularizer. Each iteration solves a convex
//! proximal subproblem on the tangent space and retracts back to the
//! manifold:
//!
//! * [`optimizers::run_r_prox_sgd`] uses unbiased minibatch gradients,
//! * [`optimizers::run_r_prox_spb`] uses the recursive SARAH estimator with
//!   periodic anchor batches,
//! * [`optimizers::run_manpg`] and [`optimizers::run_r_subgrad`] are the
//!   deterministic and subgradient baselines.
//!
//! Two applications ship with the crate: online sparse PCA and robust
//! low-rank matrix completion (see [`problems`]).

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod io;
pub mod manifold;
pub mod metrics;
pub mod optimizers;
pub mod problems;
pub mod prox;
pub mod rng;

pub use error::{Error, Result};
pub use estimators::{BatchSize, BatchSpec, EstimatorState};
pub use manifold::{Geometry, RetractionKind, StiefelPoint, TangentVector};
pub use metrics::IterationRecord;
pub use optimizers::{Algorithm, Budget, GammaChoice, OptimizerConfig, RunResult, SmoothnessEstimates, StepSchedule};
pub use problems::{RobustMcProblem, SparsePcaProblem, StochasticProblem};
pub use prox::{NonsmoothTerm, SubproblemOptions, SubproblemResult};

/// Dense real matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
