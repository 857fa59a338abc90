//! Outer loops: R-ProxSGD, R-ProxSPB, ManPG and R-Subgrad.
//!
//! All four share one driver. Each iteration forms a gradient estimate
//! `v_t`, turns it into a tangent direction and retracts
//! `X_{t+1} = Retr_{X_t}(η_t ζ_t)`. The per-iteration IFO cost is known in
//! advance, so the number of iterations allowed by the budget (and thus the
//! output index `ν`) is fixed before the run starts.

use std::time::Instant;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::estimators::{sample_batch, sgd_estimate, BatchSize, BatchSpec, EstimatorState, TransportKind};
use crate::manifold::{project_tangent, retract, RetractionKind, StiefelPoint, TangentVector};
use crate::metrics::{estimator_error_sq, stationarity_g, GMappingVariant, IterationRecord};
use crate::problems::{full_gradient, SampleMode, StochasticProblem};
use crate::prox::{solve_subproblem, SubproblemOptions};
use crate::rng::{stream, Stream};
use crate::{Error, Mat, Result};

/// Largest orthonormality drift tolerated before a scheduled correction.
pub const MAX_DRIFT: f64 = 1e-8;

/// Proximal step of the subproblem fixed by the R-ProxSPB analysis.
pub const SPB_GAMMA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RProxSgd,
    RProxSpb,
    #[serde(rename = "manpg")]
    ManPg,
    RSubgrad,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::RProxSgd, Algorithm::RProxSpb, Algorithm::ManPg, Algorithm::RSubgrad];

    /// Diminishing steps for the minibatch methods, constant for the
    /// variance-reduced and deterministic ones.
    pub fn default_schedule(self) -> StepSchedule {
        match self {
            Algorithm::RProxSgd | Algorithm::RSubgrad => StepSchedule::InverseSqrt,
            Algorithm::RProxSpb | Algorithm::ManPg => StepSchedule::Constant,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RProxSgd => "r_prox_sgd",
            Algorithm::RProxSpb => "r_prox_spb",
            Algorithm::ManPg => "manpg",
            Algorithm::RSubgrad => "r_subgrad",
        }
    }
}

/// Proximal step `γ`: a value or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    /// `gamma_from_eta` for R-ProxSGD and ManPG, `2/5` for R-ProxSPB.
    Auto,
}

impl Serialize for GammaChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GammaChoice::Fixed(g) => s.serialize_f64(*g),
            GammaChoice::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for GammaChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(g) => Ok(GammaChoice::Fixed(g)),
            Repr::Word(w) if w.eq_ignore_ascii_case("auto") => Ok(GammaChoice::Auto),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `η_t = η`.
    #[default]
    Constant,
    /// `η_t = η / √(t + 1)`.
    InverseSqrt,
}

impl StepSchedule {
    pub fn step(self, eta: f64, t: usize) -> f64 {
        match self {
            StepSchedule::Constant => eta,
            StepSchedule::InverseSqrt => eta / ((t + 1) as f64).sqrt(),
        }
    }
}

/// Stopping budget; the run ends at whichever limit is hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub iterations: Option<usize>,
    pub ifo: Option<u64>,
}

impl Budget {
    pub fn iterations(t: usize) -> Self {
        Self { iterations: Some(t), ifo: None }
    }

    pub fn ifo(total: u64) -> Self {
        Self { iterations: None, ifo: Some(total) }
    }
}

/// User-supplied estimates of the analysis constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessEstimates {
    /// `L̃ = L_R/2 + L_h M₂`.
    pub l_tilde: f64,
    pub c_e: f64,
    pub theta_sq: f64,
}

impl SmoothnessEstimates {
    pub fn validate(&self) -> Result<()> {
        let ok = self.l_tilde >= 0.0
            && self.l_tilde.is_finite()
            && self.c_e > 0.0
            && self.c_e.is_finite()
            && self.theta_sq > 0.0
            && self.theta_sq.is_finite();
        if !ok {
            return Err(Error::Parameter(format!("invalid smoothness estimates {self:?}")));
        }
        Ok(())
    }
}

/// `γ = 2η / (2L̃η² + η + 1)`.
pub fn gamma_from_eta(eta: f64, est: &SmoothnessEstimates) -> Result<f64> {
    est.validate()?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Parameter(format!("η must lie in (0, 1], got {eta}")));
    }
    Ok(2.0 * eta / (2.0 * est.l_tilde * eta * eta + eta + 1.0))
}

/// `η = min(1 / (2L̃), 1 / √(2 c_E Θ²))`.
pub fn eta_spb(est: &SmoothnessEstimates) -> Result<f64> {
    est.validate()?;
    let a = 1.0 / (2.0 * est.l_tilde);
    let b = 1.0 / (2.0 * est.c_e * est.theta_sq).sqrt();
    Ok(a.min(b))
}

/// Step-size ladder `5·10⁻⁵, 10⁻⁴, 5·10⁻⁴, …, 0.5, 1` used for tuning.
pub fn step_ladder() -> Vec<f64> {
    let mut out = Vec::new();
    for k in (0..=4i32).rev() {
        out.push(5.0 * 10f64.powi(-k - 1));
        out.push(10f64.powi(-k));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// `η`, or `η₀` under [`StepSchedule::InverseSqrt`].
    pub eta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: GammaChoice,
    /// Batch schedule; `None` gives the finite-sum defaults. Minibatch
    /// methods use `inner` as their batch size.
    #[serde(default)]
    pub batch: Option<BatchSpec>,
    /// May be left out when the experiment sets a shared budget.
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub retraction: RetractionKind,
    #[serde(default)]
    pub seed: u64,
    /// `None` picks [`Algorithm::default_schedule`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_schedule: Option<StepSchedule>,
    /// Iterations between orthonormality corrections; 0 disables them.
    #[serde(default = "default_reorth")]
    pub reorthonormalize_every: usize,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub subproblem: SubproblemOptions,
    /// Iterations between `est_err_sq` / `‖G‖` evaluations; 0 disables them.
    #[serde(default = "default_metric_every")]
    pub metric_every: usize,
    #[serde(default)]
    pub g_variant: GMappingVariant,
    /// Fill `wall_ms`. Off by default so traces are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_gamma() -> GammaChoice {
    GammaChoice::Fixed(SPB_GAMMA)
}

fn default_reorth() -> usize {
    100
}

fn default_metric_every() -> usize {
    1
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm, eta: f64, budget: Budget) -> Self {
        Self {
            algorithm,
            eta,
            gamma: default_gamma(),
            batch: None,
            budget,
            retraction: RetractionKind::Polar,
            seed: 0,
            step_schedule: None,
            reorthonormalize_every: default_reorth(),
            transport: TransportKind::Projection,
            subproblem: SubproblemOptions::default(),
            metric_every: default_metric_every(),
            g_variant: GMappingVariant::Standard,
            record_wall_time: false,
        }
    }

    /// R-ProxSPB with `q = ⌈√n⌉`, `|S¹| = n`, `|S²| = q`, `γ = 2/5` and
    /// `η` from [`eta_spb`].
    pub fn spb_defaults(n: usize, est: &SmoothnessEstimates, budget: Budget) -> Result<Self> {
        let mut cfg = Self::new(Algorithm::RProxSpb, eta_spb(est)?, budget);
        cfg.batch = Some(BatchSpec::finite_sum(n));
        cfg.gamma = GammaChoice::Fixed(SPB_GAMMA);
        Ok(cfg)
    }

    pub fn schedule(&self) -> StepSchedule {
        self.step_schedule.unwrap_or(self.algorithm.default_schedule())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: BatchSpec) -> Self {
        self.batch = Some(batch);
        self
    }

    pub fn with_gamma(mut self, gamma: GammaChoice) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_schedule(mut self, schedule: StepSchedule) -> Self {
        self.step_schedule = Some(schedule);
        self
    }

    pub fn batch_spec(&self, n: usize) -> BatchSpec {
        self.batch.unwrap_or_else(|| BatchSpec::finite_sum(n))
    }

    pub fn validate(&self) -> Result<()> {
        let eta_ok = match self.algorithm {
            Algorithm::RProxSgd => self.eta > 0.0 && self.eta <= 1.0,
            _ => self.eta > 0.0 && self.eta.is_finite(),
        };
        if !eta_ok {
            return Err(Error::Parameter(format!("{}: invalid η = {}", self.algorithm.name(), self.eta)));
        }
        if let GammaChoice::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!("γ must be > 0, got {g}")));
            }
        }
        match (self.budget.iterations, self.budget.ifo) {
            (None, None) => return Err(Error::Parameter("budget needs an iteration or IFO limit".into())),
            (Some(0), _) => return Err(Error::Parameter("iteration budget must be >= 1".into())),
            _ => {}
        }
        Ok(())
    }

    /// Resolves `"auto"` for the configured algorithm.
    pub fn resolve_gamma(&self, est: Option<&SmoothnessEstimates>) -> Result<f64> {
        match (self.gamma, self.algorithm) {
            (GammaChoice::Fixed(g), _) => Ok(g),
            (GammaChoice::Auto, Algorithm::RProxSpb) => Ok(SPB_GAMMA),
            (GammaChoice::Auto, Algorithm::RSubgrad) => Ok(SPB_GAMMA),
            (GammaChoice::Auto, _) => {
                let est = est.ok_or_else(|| Error::Config("γ = \"auto\" needs smoothness estimates".into()))?;
                gamma_from_eta(self.eta, est)
            }
        }
    }

    /// IFO cost of iteration `t` on a problem with `n` samples.
    pub fn iteration_cost(&self, t: usize, n: usize) -> u64 {
        let spec = self.batch_spec(n);
        match self.algorithm {
            Algorithm::RProxSgd | Algorithm::RSubgrad => spec.inner.resolve(n) as u64,
            Algorithm::RProxSpb => spec.iteration_cost(t, n),
            Algorithm::ManPg => n as u64,
        }
    }

    /// Number of iterations the budget allows and their total IFO cost.
    pub fn plan(&self, n: usize) -> (usize, u64) {
        let max_t = self.budget.iterations.unwrap_or(usize::MAX);
        let max_ifo = self.budget.ifo.unwrap_or(u64::MAX);
        let mut t = 0;
        let mut ifo = 0u64;
        while t < max_t {
            let c = self.iteration_cost(t, n);
            if ifo.saturating_add(c) > max_ifo {
                break;
            }
            ifo += c;
            t += 1;
        }
        (t, ifo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Completed,
    /// Non-finite values at iteration `at`; earlier records are kept.
    Aborted { at: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub final_point: StiefelPoint,
    /// `X_ν`, the algorithm's formal output.
    pub output_point: StiefelPoint,
    /// `ν ∈ {1, …, T}`.
    pub output_index: usize,
    pub records: Vec<IterationRecord>,
    pub status: RunStatus,
    pub initial_loss: f64,
    pub gamma: f64,
    pub ifo_total: u64,
    /// Largest orthonormality error seen before a scheduled correction.
    pub max_drift: f64,
}

impl RunResult {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(self.initial_loss, |r| r.loss)
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Draws `ν` uniformly from `{1, …, t}`.
pub fn sample_output_index(t: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=t)
}

pub fn run_r_prox_sgd<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunResult> {
    expect(cfg, Algorithm::RProxSgd)?;
    drive(problem, x0, cfg, est)
}

pub fn run_r_prox_spb<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunResult> {
    expect(cfg, Algorithm::RProxSpb)?;
    drive(problem, x0, cfg, est)
}

pub fn run_manpg<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunResult> {
    expect(cfg, Algorithm::ManPg)?;
    drive(problem, x0, cfg, est)
}

pub fn run_r_subgrad<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
) -> Result<RunResult> {
    expect(cfg, Algorithm::RSubgrad)?;
    drive(problem, x0, cfg, None)
}

/// Dispatches on `cfg.algorithm`.
pub fn run<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunResult> {
    drive(problem, x0, cfg, est)
}

fn expect(cfg: &OptimizerConfig, algorithm: Algorithm) -> Result<()> {
    if cfg.algorithm != algorithm {
        return Err(Error::Config(format!(
            "config is for {} but {} was called",
            cfg.algorithm.name(),
            algorithm.name()
        )));
    }
    Ok(())
}

enum Source {
    Minibatch(BatchSize),
    Recursive(EstimatorState),
    Full,
}

fn drive<P: StochasticProblem + ?Sized>(
    problem: &mut P,
    x0: &StiefelPoint,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunResult> {
    cfg.validate()?;
    let n = problem.num_samples();
    let shape = problem.shape();
    if x0.shape() != shape {
        return Err(Error::dim(shape, x0.shape()));
    }
    if x0.geometry() != problem.geometry() {
        return Err(Error::Contract(format!(
            "initial point is in {:?} mode but the problem expects {:?}",
            x0.geometry(),
            problem.geometry()
        )));
    }
    let spec = cfg.batch_spec(n);
    let mut source = match cfg.algorithm {
        Algorithm::RProxSgd | Algorithm::RSubgrad => {
            if spec.inner == BatchSize::All && problem.mode() == SampleMode::Online {
                return Err(Error::Unsupported("full batch on an online problem".into()));
            }
            if spec.inner == BatchSize::Count(0) {
                return Err(Error::Parameter("batch size must be >= 1".into()));
            }
            Source::Minibatch(spec.inner)
        }
        Algorithm::RProxSpb => {
            spec.validate(problem.mode())?;
            Source::Recursive(EstimatorState::new(spec).with_transport(cfg.transport))
        }
        Algorithm::ManPg => {
            if problem.mode() == SampleMode::Online {
                return Err(Error::Unsupported("ManPG needs the full gradient; the problem is online".into()));
            }
            Source::Full
        }
    };
    let gamma = cfg.resolve_gamma(est)?;
    let (t_plan, _) = cfg.plan(n);
    if t_plan == 0 {
        return Err(Error::Config("budget does not cover a single iteration".into()));
    }

    let mut batch_rng = stream(cfg.seed, Stream::Batches);
    let nu = sample_output_index(t_plan, &mut stream(cfg.seed, Stream::OutputIndex));
    let h = problem.nonsmooth().clone();
    let start = Instant::now();

    let mut x = x0.clone();
    let initial_loss = problem.loss(x.matrix())?;
    let mut output_point = x.clone();
    let mut records = Vec::with_capacity(t_plan);
    let mut ifo = 0u64;
    let mut max_drift = 0.0f64;
    let mut status = RunStatus::Completed;

    for t in 0..t_plan {
        let v = match &mut source {
            Source::Minibatch(size) => {
                let batch = sample_batch(n, *size, &mut batch_rng);
                sgd_estimate(&*problem, &x, &batch, &mut ifo)?
            }
            Source::Recursive(state) => {
                let before = state.ifo_count();
                let v = state.sarah_estimate(&*problem, &x, &mut batch_rng)?;
                ifo += state.ifo_count() - before;
                v
            }
            Source::Full => {
                ifo += n as u64;
                full_gradient(&*problem, x.matrix())?
            }
        };
        if v.iter().any(|e| !e.is_finite()) {
            status = abort(t, "non-finite gradient estimate");
            break;
        }
        let measure = cfg.metric_every > 0 && t % cfg.metric_every == 0;
        let est_err_sq = if measure { estimator_error_sq(&*problem, x.matrix(), &v)? } else { None };

        let direction = match direction(cfg.algorithm, &x, &v, gamma, &h, &cfg.subproblem) {
            Ok(d) => d,
            Err(Error::Numerical(msg)) => {
                status = abort(t, &msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let zeta_norm = direction.norm();
        let eta_t = cfg.schedule().step(cfg.eta, t);
        let mut next = match retract(&x, &direction.scaled(eta_t), cfg.retraction) {
            Ok(p) => p,
            Err(Error::Numerical(msg)) => {
                status = abort(t, &msg);
                break;
            }
            Err(e) => return Err(e),
        };
        if cfg.reorthonormalize_every > 0 && (t + 1) % cfg.reorthonormalize_every == 0 {
            let drift = next.orthonormality_error();
            max_drift = max_drift.max(drift);
            if drift > MAX_DRIFT {
                warn!("orthonormality drift {drift:.3e} at t={} exceeds {MAX_DRIFT:.0e}", t + 1);
            }
            next.reorthonormalize()?;
        }
        x = next;
        problem.after_step(&x)?;

        let loss = problem.loss(x.matrix())?;
        let mut failure = (!loss.is_finite()).then(|| "non-finite loss".to_string());
        let g_norm = if failure.is_none() && measure && problem.mode() == SampleMode::FiniteSum {
            match stationarity_g(&*problem, &x, gamma, &cfg.subproblem, RetractionKind::Polar, cfg.g_variant) {
                Ok((_, g)) => Some(g),
                Err(Error::Numerical(msg)) => {
                    failure = Some(msg);
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let wall_ms = cfg.record_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3);
        records.push(IterationRecord { t: t + 1, ifo, loss, zeta_norm, est_err_sq, g_norm, wall_ms });
        if t + 1 == nu {
            output_point = x.clone();
        }
        if let Some(msg) = failure {
            status = abort(t + 1, &msg);
            break;
        }
    }
    if status != RunStatus::Completed && records.len() < nu {
        output_point = x.clone();
    }
    debug!("{} finished: {} iterations, {} IFO, ν = {nu}", cfg.algorithm.name(), records.len(), ifo);
    Ok(RunResult {
        algorithm: cfg.algorithm,
        final_point: x,
        output_point,
        output_index: nu,
        records,
        status,
        initial_loss,
        gamma,
        ifo_total: ifo,
        max_drift,
    })
}

fn abort(t: usize, reason: &str) -> RunStatus {
    warn!("run aborted at t={t}: {reason}");
    RunStatus::Aborted { at: t, reason: reason.to_string() }
}

/// Tangent direction `ζ_t` (proximal methods) or `ξ_t` (subgradient).
fn direction(
    algorithm: Algorithm,
    x: &StiefelPoint,
    v: &Mat,
    gamma: f64,
    h: &crate::prox::NonsmoothTerm,
    opts: &SubproblemOptions,
) -> Result<TangentVector> {
    match algorithm {
        Algorithm::RSubgrad => {
            let sub = v + h.subgradient(x.matrix());
            Ok(project_tangent(x, &sub)?.scaled(-1.0))
        }
        _ => Ok(solve_subproblem(x, v, gamma, h, opts)?.zeta),
    }
}
