//! Seeded experiment driving: configs, multi-seed runs, step-size grids,
//! gradient checks, the subproblem oracle suite and synthetic datasets.
//!
//! Every run derives its streams from one master seed (see [`crate::rng`]),
//! so results depend only on the config and the seed list.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{load_matrix, save_matrix};
use crate::manifold::{gaussian_matrix, project_matrix, random_point_with, random_tangent_with, Geometry, StiefelPoint};
use crate::metrics::{stationarity_g, IterationRecord};
use crate::optimizers::{run, step_ladder, Algorithm, Budget, OptimizerConfig, RunResult, RunStatus, SmoothnessEstimates};
use crate::problems::{McSynthConfig, RobustMcProblem, SampleMode, SparsePcaProblem, SpcaSynthConfig, StochasticProblem};
use crate::prox::oracle::{solve_reference, DEFAULT_ITERS};
use crate::prox::{solve_subproblem, NonsmoothTerm, SubproblemOptions};
use crate::rng::{stream, Stream};
use crate::{Error, Mat, Result};

pub const CSV_HEADER: [&str; 7] = ["t", "ifo", "loss", "zeta_norm", "est_err_sq", "g_norm", "wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Planted sparse PCA. Without `data_seed` each run seed draws its own
    /// instance.
    SparsePcaSynthetic {
        #[serde(default)]
        config: SpcaSynthConfig,
        #[serde(default)]
        data_seed: Option<u64>,
        #[serde(default)]
        online: bool,
    },
    /// Sparse PCA on a matrix file with one sample per row.
    SparsePcaFile {
        path: PathBuf,
        r: usize,
        mu: f64,
        #[serde(default)]
        online: bool,
    },
    RobustMcSynthetic {
        #[serde(default)]
        config: McSynthConfig,
        #[serde(default)]
        data_seed: Option<u64>,
        #[serde(default = "one")]
        refresh_every: usize,
    },
    /// Matrix completion on a file where `NaN` marks unobserved entries.
    RobustMcFile {
        path: PathBuf,
        r: usize,
        lambda: f64,
        l1_weight: f64,
        #[serde(default = "one")]
        refresh_every: usize,
    },
}

fn one() -> usize {
    1
}

impl ProblemSpec {
    fn data_seed(&self, run_seed: u64) -> u64 {
        match self {
            ProblemSpec::SparsePcaSynthetic { data_seed, .. } | ProblemSpec::RobustMcSynthetic { data_seed, .. } => {
                data_seed.unwrap_or(run_seed)
            }
            _ => run_seed,
        }
    }

    pub fn build(&self, run_seed: u64) -> Result<ProblemInstance> {
        let mut rng = stream(self.data_seed(run_seed), Stream::Data);
        Ok(match self {
            ProblemSpec::SparsePcaSynthetic { config, online, .. } => {
                let p = SparsePcaProblem::synthetic(config, &mut rng)?;
                ProblemInstance::SparsePca(if *online { p.with_mode(SampleMode::Online) } else { p })
            }
            ProblemSpec::SparsePcaFile { path, r, mu, online } => {
                let p = SparsePcaProblem::new(load_matrix(path)?, *r, *mu)?;
                ProblemInstance::SparsePca(if *online { p.with_mode(SampleMode::Online) } else { p })
            }
            ProblemSpec::RobustMcSynthetic { config, refresh_every, .. } => {
                ProblemInstance::RobustMc(RobustMcProblem::synthetic(config, &mut rng)?.with_refresh_every(*refresh_every))
            }
            ProblemSpec::RobustMcFile { path, r, lambda, l1_weight, refresh_every } => ProblemInstance::RobustMc(
                RobustMcProblem::from_observed(load_matrix(path)?, *r, *lambda, *l1_weight)?
                    .with_refresh_every(*refresh_every),
            ),
        })
    }

    fn paths(&self) -> Vec<&Path> {
        match self {
            ProblemSpec::SparsePcaFile { path, .. } | ProblemSpec::RobustMcFile { path, .. } => vec![path.as_path()],
            _ => Vec::new(),
        }
    }
}

/// A concrete problem ready to optimize.
#[derive(Debug, Clone)]
pub enum ProblemInstance {
    SparsePca(SparsePcaProblem),
    RobustMc(RobustMcProblem),
}

impl ProblemInstance {
    pub fn as_dyn(&self) -> &dyn StochasticProblem {
        match self {
            ProblemInstance::SparsePca(p) => p,
            ProblemInstance::RobustMc(p) => p,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn StochasticProblem {
        match self {
            ProblemInstance::SparsePca(p) => p,
            ProblemInstance::RobustMc(p) => p,
        }
    }

    /// Random starting point from the run's init stream; for matrix
    /// completion this also resets `S = 0` and the `V` cache.
    pub fn initial_point(&mut self, run_seed: u64) -> Result<StiefelPoint> {
        let mut rng = stream(run_seed, Stream::Init);
        match self {
            ProblemInstance::SparsePca(p) => {
                let (d, r) = p.shape();
                random_point_with(d, r, Geometry::Stiefel, &mut rng)
            }
            ProblemInstance::RobustMc(p) => p.initialize(&mut rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    /// Used in file names; defaults to the algorithm name.
    #[serde(default)]
    pub label: Option<String>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub estimates: Option<SmoothnessEstimates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    pub optimizers: Vec<OptimizerEntry>,
    pub seeds: Vec<u64>,
    /// Overrides every optimizer's budget when set.
    #[serde(default)]
    pub budget: Option<Budget>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Overrides every optimizer's metric cadence when set.
    #[serde(default)]
    pub metric_every: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizers.is_empty() {
            return Err(Error::Config("at least one optimizer is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for p in self.problem.paths() {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        for (k, e) in self.optimizers.iter().enumerate() {
            let cfg = self.effective(e, 0, None);
            cfg.validate().map_err(|err| Error::Config(format!("optimizer {k}: {err}")))?;
            if let Some(est) = &e.estimates {
                est.validate().map_err(|err| Error::Config(format!("optimizer {k}: {err}")))?;
            }
        }
        Ok(())
    }

    /// Optimizer config with experiment-level overrides and the run seed.
    pub fn effective(&self, entry: &OptimizerEntry, seed: u64, metric_every: Option<usize>) -> OptimizerConfig {
        let mut cfg = entry.optimizer.clone();
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(k) = metric_every.or(self.metric_every) {
            cfg.metric_every = k;
        }
        cfg.seed = seed;
        cfg
    }

    /// Unique, file-safe labels in optimizer order.
    pub fn labels(&self) -> Vec<String> {
        let mut seen: HashMap<String, usize> = HashMap::new();
        self.optimizers
            .iter()
            .map(|e| {
                let base: String = e
                    .label
                    .clone()
                    .unwrap_or_else(|| e.optimizer.algorithm.name().to_string())
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                    .collect();
                let k = seen.entry(base.clone()).or_insert(0);
                *k += 1;
                if *k == 1 {
                    base
                } else {
                    format!("{base}_{k}")
                }
            })
            .collect()
    }
}

/// Knobs that come from the command line rather than the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_offset: u64,
    /// Worker threads; 0 or 1 runs sequentially.
    pub parallel: usize,
    pub metric_every: Option<usize>,
}

impl RunOptions {
    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub eta: f64,
    pub gamma: f64,
    pub final_loss: f64,
    /// `‖G‖` at the final iterate; absent for online problems.
    pub final_g_norm: Option<f64>,
    pub ifo_total: u64,
    pub iterations: usize,
    pub output_index: usize,
    pub status: RunStatus,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub runs: usize,
    pub median_final_loss: f64,
    pub median_ifo_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub name: String,
    pub seed_offset: u64,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentSummary {
    pub fn any_aborted(&self) -> bool {
        self.runs.iter().any(|r| r.status != RunStatus::Completed)
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One optimizer run on a fresh copy of the problem.
pub struct RunOutput {
    pub result: RunResult,
    pub final_g_norm: Option<f64>,
}

pub fn execute_run(
    mut problem: ProblemInstance,
    cfg: &OptimizerConfig,
    est: Option<&SmoothnessEstimates>,
) -> Result<RunOutput> {
    let x0 = problem.initial_point(cfg.seed)?;
    let result = run(problem.as_dyn_mut(), &x0, cfg, est)?;
    let p = problem.as_dyn();
    let final_g_norm = if p.mode() == SampleMode::FiniteSum && result.is_completed() {
        match stationarity_g(p, &result.final_point, result.gamma, &cfg.subproblem, cfg.retraction, cfg.g_variant) {
            Ok((_, g)) => Some(g),
            Err(Error::Numerical(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(RunOutput { result, final_g_norm })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records as CSV with the fixed column order; absent metrics are
/// empty fields.
pub fn write_records<W: Write>(w: W, records: &[IterationRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        out.write_record([
            r.t.to_string(),
            r.ifo.to_string(),
            r.loss.to_string(),
            r.zeta_norm.to_string(),
            fmt_opt(r.est_err_sq),
            fmt_opt(r.g_norm),
            fmt_opt(r.wall_ms),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a file written by [`write_records`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path.as_ref()).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 2, col: 0, msg: e.to_string() })?;
        let field = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::Parse { row: i + 2, col: j + 1, msg: format!("{s:?}") })
        };
        let req = |j: usize| -> Result<f64> {
            field(j)?.ok_or_else(|| Error::Parse { row: i + 2, col: j + 1, msg: "missing value".into() })
        };
        out.push(IterationRecord {
            t: req(0)? as usize,
            ifo: req(1)? as u64,
            loss: req(2)?,
            zeta_norm: req(3)?,
            est_err_sq: field(4)?,
            g_norm: field(5)?,
            wall_ms: field(6)?,
        });
    }
    Ok(out)
}

fn with_pool<T: Send>(parallel: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if parallel <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

struct Job {
    entry: usize,
    seed: u64,
    cfg: OptimizerConfig,
}

fn shared_instance(spec: &ProblemSpec) -> Result<Option<ProblemInstance>> {
    match spec {
        ProblemSpec::SparsePcaSynthetic { data_seed: Some(s), .. }
        | ProblemSpec::RobustMcSynthetic { data_seed: Some(s), .. } => Ok(Some(spec.build(*s)?)),
        ProblemSpec::SparsePcaFile { .. } | ProblemSpec::RobustMcFile { .. } => Ok(Some(spec.build(0)?)),
        _ => Ok(None),
    }
}

fn run_jobs(
    cfg: &ExperimentConfig,
    jobs: &[Job],
    parallel: usize,
) -> Result<Vec<Result<RunOutput>>> {
    let shared = shared_instance(&cfg.problem)?;
    let exec = |job: &Job| -> Result<RunOutput> {
        let problem = match &shared {
            Some(p) => p.clone(),
            None => cfg.problem.build(job.seed)?,
        };
        execute_run(problem, &job.cfg, cfg.optimizers[job.entry].estimates.as_ref())
    };
    with_pool(parallel, || {
        if parallel <= 1 {
            jobs.iter().map(exec).collect()
        } else {
            jobs.par_iter().map(exec).collect()
        }
    })
}

/// Runs every optimizer on every seed, writing one CSV per run and
/// `summary.json`. Files of completed runs are written even when another
/// run fails.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = opts.out_dir(cfg);
    fs::create_dir_all(&out)?;
    let labels = cfg.labels();
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s.wrapping_add(opts.seed_offset)).collect();
    let jobs: Vec<Job> = (0..cfg.optimizers.len())
        .flat_map(|e| seeds.iter().map(move |&s| (e, s)))
        .map(|(entry, seed)| Job { entry, seed, cfg: cfg.effective(&cfg.optimizers[entry], seed, opts.metric_every) })
        .collect();
    let outputs = run_jobs(cfg, &jobs, opts.parallel)?;

    let mut runs = Vec::new();
    let mut first_error = None;
    for (job, outcome) in jobs.iter().zip(outputs) {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                first_error.get_or_insert(e);
                continue;
            }
        };
        let label = &labels[job.entry];
        let name = format!("{label}_seed{}.csv", job.seed);
        let file = fs::File::create(out.join(&name))?;
        write_records(std::io::BufWriter::new(file), &o.result.records)?;
        info!("{name}: final loss {:.6e}, {} IFO", o.result.final_loss(), o.result.ifo_total);
        runs.push(RunSummary {
            label: label.clone(),
            algorithm: job.cfg.algorithm,
            seed: job.seed,
            eta: job.cfg.eta,
            gamma: o.result.gamma,
            final_loss: o.result.final_loss(),
            final_g_norm: o.final_g_norm,
            ifo_total: o.result.ifo_total,
            iterations: o.result.records.len(),
            output_index: o.result.output_index,
            status: o.result.status.clone(),
            csv: name,
        });
    }
    let aggregates = labels
        .iter()
        .map(|label| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| &r.label == label).collect();
            Aggregate {
                label: label.clone(),
                runs: mine.len(),
                median_final_loss: median(&mine.iter().map(|r| r.final_loss).collect::<Vec<_>>()),
                median_ifo_total: median(&mine.iter().map(|r| r.ifo_total as f64).collect::<Vec<_>>()),
            }
        })
        .collect();
    let summary = ExperimentSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        name: cfg.name.clone(),
        seed_offset: opts.seed_offset,
        seeds,
        config: cfg.clone(),
        runs,
        aggregates,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("summary.json"), text + "\n")?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub eta: f64,
    pub median_final_loss: f64,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Best step per optimizer, by median final loss over seeds.
    pub best: Vec<GridCell>,
}

/// Sweeps `η` over [`step_ladder`] for every optimizer. Aborted runs
/// count as `+∞`. Metrics are switched off while sweeping.
pub fn run_grid(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<GridReport> {
    cfg.validate()?;
    let labels = cfg.labels();
    let ladder = step_ladder();
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s.wrapping_add(opts.seed_offset)).collect();
    let mut jobs = Vec::new();
    let mut keys = Vec::new();
    for (entry, e) in cfg.optimizers.iter().enumerate() {
        for (k, &eta) in ladder.iter().enumerate() {
            if e.optimizer.algorithm == Algorithm::RProxSgd && eta > 1.0 {
                continue;
            }
            for &seed in &seeds {
                let mut c = cfg.effective(e, seed, Some(0));
                c.eta = eta;
                jobs.push(Job { entry, seed, cfg: c });
                keys.push((entry, k));
            }
        }
    }
    let outputs = run_jobs(cfg, &jobs, opts.parallel)?;
    let mut by_cell: HashMap<(usize, usize), (Vec<f64>, usize)> = HashMap::new();
    for (key, out) in keys.iter().zip(outputs) {
        let slot = by_cell.entry(*key).or_default();
        match out {
            Ok(o) if o.result.is_completed() => slot.0.push(o.result.final_loss()),
            Ok(_) | Err(Error::Numerical(_)) => {
                slot.0.push(f64::INFINITY);
                slot.1 += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let mut cells = Vec::new();
    let mut best: Vec<GridCell> = Vec::new();
    for (entry, label) in labels.iter().enumerate() {
        let mut winner: Option<GridCell> = None;
        for (k, &eta) in ladder.iter().enumerate() {
            let Some((losses, aborted)) = by_cell.get(&(entry, k)) else { continue };
            let cell = GridCell { label: label.clone(), eta, median_final_loss: median(losses), aborted: *aborted };
            if winner.as_ref().is_none_or(|w| cell.median_final_loss < w.median_final_loss) {
                winner = Some(cell.clone());
            }
            cells.push(cell);
        }
        best.extend(winner);
    }
    let report = GridReport { cells, best };
    let out = opts.out_dir(cfg);
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("grid.csv")).map_err(|e| Error::Config(e.to_string()))?;
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["label", "eta", "median_final_loss", "aborted"]).map_err(io)?;
    for c in &report.cells {
        w.write_record([c.label.clone(), c.eta.to_string(), c.median_final_loss.to_string(), c.aborted.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("grid_best.json"), text + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub sample: usize,
    pub finite_difference: f64,
    pub analytic: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub problem: String,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor of `1e-8`.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8)
}

/// Central differences `h = 1e-6` of per-sample losses along random
/// tangent directions at a random point. Matrix completion freezes
/// `V = V_{U,S}` as the per-entry gradient does.
pub fn check_gradients(instance: &mut ProblemInstance, seed: u64, directions: usize) -> Result<GradCheckReport> {
    let h = 1e-6;
    let x = instance.initial_point(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(directions);
    let name = match instance {
        ProblemInstance::SparsePca(p) => {
            for _ in 0..directions {
                let i = rng.random_range(0..p.num_samples());
                let dir = random_tangent_with(&x, &mut rng)?;
                let g = p.sample_gradient(x.matrix(), i)?;
                let plus = p.sample_smooth_loss(&(x.matrix() + dir.matrix() * h), i)?;
                let minus = p.sample_smooth_loss(&(x.matrix() - dir.matrix() * h), i)?;
                let fd = (plus - minus) / (2.0 * h);
                let an = g.dot(dir.matrix());
                entries.push(GradCheckEntry { sample: i, finite_difference: fd, analytic: an, rel_err: rel_err(fd, an) });
            }
            "sparse_pca"
        }
        ProblemInstance::RobustMc(p) => {
            p.set_sparse(gaussian_matrix(p.dims().0, p.dims().1, &mut rng).component_mul(&mask_f64(p)) * 0.1)?;
            p.refresh_v(x.matrix())?;
            let v = p.v_cache().clone();
            for _ in 0..directions {
                let k = rng.random_range(0..p.observed().len());
                let (i, _) = p.observed()[k];
                // a direction with mass on row i so the entry loss moves
                let mut dir = random_tangent_with(&x, &mut rng)?.into_matrix();
                dir.row_mut(i).scale_mut(10.0);
                let dir = project_matrix(&x, &dir);
                let g = p.entry_gradient(x.matrix(), k)?;
                let plus = p.entry_loss(&(x.matrix() + &dir * h), &v, k);
                let minus = p.entry_loss(&(x.matrix() - &dir * h), &v, k);
                let fd = (plus - minus) / (2.0 * h);
                let an = g.dot(&dir);
                entries.push(GradCheckEntry { sample: k, finite_difference: fd, analytic: an, rel_err: rel_err(fd, an) });
            }
            "robust_mc"
        }
    };
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { problem: name.into(), step: h, entries, max_rel_err })
}

fn mask_f64(p: &RobustMcProblem) -> Mat {
    p.mask().map(|b| if b { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub d: usize,
    pub r: usize,
    pub geometry: Geometry,
    pub gamma: f64,
    pub mu: f64,
    /// `‖ζ − ζ_ref‖`; for `μ = 0` the reference is `−γ Proj_X(v)`.
    pub discrepancy: f64,
    pub kkt_residual: f64,
    pub inner_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
    pub max_discrepancy: f64,
    /// Largest discrepancy among `μ = 0` cases.
    pub max_closed_form_discrepancy: f64,
    pub max_kkt_residual: f64,
}

pub const ORACLE_GAMMAS: [f64; 3] = [0.1, 0.4, 1.0];
pub const ORACLE_MUS: [f64; 3] = [0.0, 0.1, 0.5];

/// Compares the Newton subproblem solver with the tangent-coordinate
/// reference on `count` seeded instances with `d ≤ 8`, `r ≤ 3`, cycling
/// through every `(γ, μ)` pair. Every fourth instance uses Grassmann mode.
pub fn prox_oracle_suite(count: usize, seed: u64) -> Result<OracleReport> {
    let cases = (0..count)
        .into_par_iter()
        .map(|k| -> Result<OracleCase> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let r = rng.random_range(1..=3);
            let d = rng.random_range(r + 1..=8);
            let geometry = if k % 4 == 3 { Geometry::Grassmann } else { Geometry::Stiefel };
            let gamma = ORACLE_GAMMAS[k % 3];
            let mu = ORACLE_MUS[(k / 3) % 3];
            let x = random_point_with(d, r, geometry, &mut rng)?;
            let v = gaussian_matrix(d, r, &mut rng);
            let h = if mu == 0.0 { NonsmoothTerm::Zero } else { NonsmoothTerm::l1(mu) };
            let sol = solve_subproblem(&x, &v, gamma, &h, &SubproblemOptions::with_tol(1e-12))?;
            let reference = if mu == 0.0 {
                project_matrix(&x, &v) * -gamma
            } else {
                solve_reference(&x, &v, gamma, &h, DEFAULT_ITERS)
            };
            Ok(OracleCase {
                d,
                r,
                geometry,
                gamma,
                mu,
                discrepancy: (sol.zeta.matrix() - reference).norm(),
                kkt_residual: sol.kkt_residual,
                inner_iters: sol.inner_iters,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_of = |f: &dyn Fn(&OracleCase) -> Option<f64>| cases.iter().filter_map(f).fold(0.0, f64::max);
    Ok(OracleReport {
        max_discrepancy: max_of(&|c| Some(c.discrepancy)),
        max_closed_form_discrepancy: max_of(&|c| (c.mu == 0.0).then_some(c.discrepancy)),
        max_kkt_residual: max_of(&|c| Some(c.kkt_residual)),
        cases,
    })
}

/// Writes the dataset of a synthetic problem spec with the given seed.
/// Sparse PCA produces `data.rmat` (samples × d) and `loadings.rmat`;
/// matrix completion produces `observed.rmat` with `NaN` off `Ω`.
pub fn write_synthetic(spec: &ProblemSpec, seed: u64, out: &Path, csv: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let ext = if csv { "csv" } else { "rmat" };
    let mut rng = stream(spec.data_seed(seed), Stream::Data);
    let mut written = Vec::new();
    match spec {
        ProblemSpec::SparsePcaSynthetic { config, .. } => {
            // replays the generator so the files match `build`
            let p = SparsePcaProblem::synthetic(config, &mut rng)?;
            let mut rng = stream(spec.data_seed(seed), Stream::Data);
            let loadings = config.loadings(&mut rng)?;
            let data_path = out.join(format!("data.{ext}"));
            save_matrix(&data_path, p.data())?;
            let l_path = out.join(format!("loadings.{ext}"));
            save_matrix(&l_path, &loadings)?;
            written.extend([data_path, l_path]);
        }
        ProblemSpec::RobustMcSynthetic { config, .. } => {
            let (target, mask) = config.generate(&mut rng)?;
            let observed = target.zip_map(&mask, |v, m| if m { v } else { f64::NAN });
            let path = out.join(format!("observed.{ext}"));
            save_matrix(&path, &observed)?;
            written.push(path);
        }
        _ => return Err(Error::Config("synth needs a synthetic problem spec".into())),
    }
    Ok(written)
}
