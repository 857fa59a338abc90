//! Stochastic estimators of the Euclidean gradient `∇f(X_t)`.
//!
//! Every sampled gradient `∇f_i(X)` costs one IFO. Batches are drawn
//! uniformly with replacement; a batch of size [`BatchSize::All`] is the
//! ordered index range `0..n`, i.e. the full gradient.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::manifold::{project_tangent, transport, transport_isometric, StiefelPoint};
use crate::problems::{batch_gradient, SampleMode, StochasticProblem};
use crate::{Error, Mat, Result};

/// A batch size, either a count or the whole finite sum.
///
/// Serialized as an integer or the string `"all"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    All,
    Count(usize),
}

impl BatchSize {
    /// Number of samples for a problem with `n` samples.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::All => n,
            BatchSize::Count(c) => c,
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::All => s.serialize_str("all"),
            BatchSize::Count(c) => s.serialize_u64(*c as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(c) => Ok(BatchSize::Count(c)),
            Repr::Word(w) if w.eq_ignore_ascii_case("all") => Ok(BatchSize::All),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a count or \"all\", got {w:?}"))),
        }
    }
}

/// Batch schedule of the recursive estimator: an anchor batch every
/// `epoch` iterations and inner batches in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub anchor: BatchSize,
    pub inner: BatchSize,
    pub epoch: usize,
}

impl BatchSpec {
    /// Finite-sum defaults: `q = ⌈√n⌉`, full anchor batch, inner batch `q`.
    pub fn finite_sum(n: usize) -> Self {
        let q = ceil_sqrt(n);
        Self { anchor: BatchSize::All, inner: BatchSize::Count(q), epoch: q }
    }

    pub fn validate(&self, problem_mode: SampleMode) -> Result<()> {
        if self.epoch == 0 {
            return Err(Error::Parameter("epoch length q must be >= 1".into()));
        }
        for (name, b) in [("anchor", self.anchor), ("inner", self.inner)] {
            match b {
                BatchSize::Count(0) => return Err(Error::Parameter(format!("{name} batch size must be >= 1"))),
                BatchSize::All if problem_mode == SampleMode::Online => {
                    return Err(Error::Unsupported(format!("{name} batch \"all\" on an online problem")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// IFO cost of iteration `t`: `|S¹|` on anchors, `2|S²|` otherwise.
    pub fn iteration_cost(&self, t: usize, n: usize) -> u64 {
        if t.is_multiple_of(self.epoch) {
            self.anchor.resolve(n) as u64
        } else {
            2 * self.inner.resolve(n) as u64
        }
    }

    /// Closed-form IFO total after `t_iters` iterations.
    pub fn total_cost(&self, t_iters: usize, n: usize) -> u64 {
        let anchors = t_iters.div_ceil(self.epoch) as u64;
        let inner = t_iters as u64 - anchors;
        anchors * self.anchor.resolve(n) as u64 + 2 * inner * self.inner.resolve(n) as u64
    }

    /// Complexity-bound accounting `⌈T/q⌉·|S¹| + T·|S²|`: one anchor batch per
    /// epoch plus one inner batch per iteration.
    pub fn bound_cost(&self, t_iters: usize, n: usize) -> u64 {
        let anchors = t_iters.div_ceil(self.epoch) as u64;
        anchors * self.anchor.resolve(n) as u64 + t_iters as u64 * self.inner.resolve(n) as u64
    }
}

/// Smallest integer `q` with `q² >= n`.
pub fn ceil_sqrt(n: usize) -> usize {
    let mut q = (n as f64).sqrt() as usize;
    while q * q < n {
        q += 1;
    }
    while q > 1 && (q - 1) * (q - 1) >= n {
        q -= 1;
    }
    q.max(1)
}

/// Draws a batch of indices in `0..n`.
pub fn sample_batch(n: usize, size: BatchSize, rng: &mut impl Rng) -> Vec<usize> {
    match size {
        BatchSize::All => (0..n).collect(),
        BatchSize::Count(c) => (0..c).map(|_| rng.random_range(0..n)).collect(),
    }
}

/// Minibatch gradient `(1/|S|) Σ_{i∈S} ∇f_i(X)`, charging `|S|` IFOs.
pub fn sgd_estimate<P: StochasticProblem + ?Sized>(
    problem: &P,
    x: &StiefelPoint,
    batch: &[usize],
    ifo: &mut u64,
) -> Result<Mat> {
    let g = batch_gradient(problem, x.matrix(), batch)?;
    *ifo += batch.len() as u64;
    Ok(g)
}

/// How the previous correction is carried to the new tangent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Projection,
    Isometric,
}

/// State of the recursive estimator
/// `v_t = ∇f_{S²}(X_t) − Γ(∇f_{S²}(X_{t−1}) − v_{t−1})`.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    spec: BatchSpec,
    transport: TransportKind,
    prev_point: Option<StiefelPoint>,
    prev_estimate: Option<Mat>,
    phase: usize,
    ifo: u64,
    bound: u64,
}

impl EstimatorState {
    pub fn new(spec: BatchSpec) -> Self {
        Self { spec, transport: TransportKind::Projection, prev_point: None, prev_estimate: None, phase: 0, ifo: 0, bound: 0 }
    }

    pub fn with_transport(mut self, transport: TransportKind) -> Self {
        self.transport = transport;
        self
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn ifo_count(&self) -> u64 {
        self.ifo
    }

    /// Cost under the complexity-bound convention, see [`BatchSpec::bound_cost`].
    pub fn bound_count(&self) -> u64 {
        self.bound
    }

    /// Iterations since the last anchor, in `[0, q)`.
    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn prev_estimate(&self) -> Option<&Mat> {
        self.prev_estimate.as_ref()
    }

    /// Next estimate at `x`, sampling the batch from `rng`.
    pub fn sarah_estimate<P: StochasticProblem + ?Sized>(
        &mut self,
        problem: &P,
        x: &StiefelPoint,
        rng: &mut impl Rng,
    ) -> Result<Mat> {
        let n = problem.num_samples();
        let size = if self.phase == 0 { self.spec.anchor } else { self.spec.inner };
        let batch = sample_batch(n, size, rng);
        self.estimate_with_batch(problem, x, &batch)
    }

    /// Same as [`Self::sarah_estimate`] with a caller-chosen batch.
    pub fn estimate_with_batch<P: StochasticProblem + ?Sized>(
        &mut self,
        problem: &P,
        x: &StiefelPoint,
        batch: &[usize],
    ) -> Result<Mat> {
        let v = if self.phase == 0 {
            let g = batch_gradient(problem, x.matrix(), batch)?;
            self.ifo += batch.len() as u64;
            self.bound += batch.len() as u64 + self.spec.inner.resolve(problem.num_samples()) as u64;
            g
        } else {
            let (prev, v_prev) = match (&self.prev_point, &self.prev_estimate) {
                (Some(p), Some(v)) => (p, v),
                _ => return Err(Error::Contract("recursive step without a previous estimate".into())),
            };
            if prev.shape() != x.shape() || v_prev.shape() != x.shape() {
                return Err(Error::Contract(format!(
                    "estimator state is {:?} but the point is {:?}",
                    prev.shape(),
                    x.shape()
                )));
            }
            let g_cur = batch_gradient(problem, x.matrix(), batch)?;
            let g_prev = batch_gradient(problem, prev.matrix(), batch)?;
            self.ifo += 2 * batch.len() as u64;
            self.bound += batch.len() as u64;
            let correction = project_tangent(prev, &(g_prev - v_prev))?;
            let moved = match self.transport {
                TransportKind::Projection => transport(prev, x, &correction)?,
                TransportKind::Isometric => transport_isometric(prev, x, &correction)?,
            };
            g_cur - moved.matrix()
        };
        self.prev_point = Some(x.clone());
        self.prev_estimate = Some(v.clone());
        self.phase = (self.phase + 1) % self.spec.epoch;
        Ok(v)
    }
}
