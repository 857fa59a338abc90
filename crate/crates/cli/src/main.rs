use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsprox::experiment::{
    check_gradients, prox_oracle_suite, run_experiment, run_grid, write_synthetic, ExperimentConfig, RunOptions,
};
use rsprox::Error;

/// Relative error allowed by `check-grad` before it reports failure.
const GRAD_TOL: f64 = 1e-5;
/// Discrepancy allowed by `prox-oracle` before it reports failure.
const ORACLE_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "rsprox", version, about = "Riemannian stochastic proximal gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every optimizer on every seed and write CSV traces plus summary.json.
    Run(RunArgs),
    /// Tune the step size of every optimizer over the standard ladder.
    Grid(RunArgs),
    /// Finite-difference check of the per-sample gradients.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        directions: usize,
    },
    /// Compare the subproblem solver with the reference solver.
    ProxOracle {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic dataset described by a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write CSV instead of the binary format.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    metric_every: Option<usize>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out.clone(),
            seed_offset: self.seed_offset,
            parallel: self.parallel,
            metric_every: self.metric_every,
        }
    }
}

enum Outcome {
    Ok,
    /// Finished, but some check or run failed numerically.
    Numerical(String),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        Error::Contract(_) => 1,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Contract(_) => "contract",
        Error::Parameter(_) => "parameter",
        Error::Numerical(_) => "numerical",
        Error::Unsupported(_) => "unsupported",
        Error::Format { .. } => "format",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    let text = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let summary = run_experiment(&cfg, &args.options())?;
            for agg in &summary.aggregates {
                println!("{}\truns={}\tmedian_final_loss={:e}", agg.label, agg.runs, agg.median_final_loss);
            }
            if summary.any_aborted() {
                let n = summary.runs.iter().filter(|r| !matches!(r.status, rsprox::optimizers::RunStatus::Completed)).count();
                return Ok(Outcome::Numerical(format!("{n} run(s) aborted on non-finite values")));
            }
            Ok(Outcome::Ok)
        }
        Command::Grid(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let report = run_grid(&cfg, &args.options())?;
            println!("label\tbest_eta\tmedian_final_loss");
            for b in &report.best {
                println!("{}\t{:e}\t{:e}", b.label, b.eta, b.median_final_loss);
            }
            Ok(Outcome::Ok)
        }
        Command::CheckGrad { config, seed, directions } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut instance = cfg.problem.build(seed)?;
            let report = check_gradients(&mut instance, seed, directions)?;
            print_json(&report)?;
            if report.max_rel_err > GRAD_TOL {
                return Ok(Outcome::Numerical(format!("max relative error {:e} > {GRAD_TOL:e}", report.max_rel_err)));
            }
            Ok(Outcome::Ok)
        }
        Command::ProxOracle { count, seed } => {
            let report = prox_oracle_suite(count, seed)?;
            println!(
                "cases={} max_discrepancy={:e} max_closed_form_discrepancy={:e} max_kkt_residual={:e}",
                report.cases.len(),
                report.max_discrepancy,
                report.max_closed_form_discrepancy,
                report.max_kkt_residual
            );
            if report.max_discrepancy > ORACLE_TOL {
                return Ok(Outcome::Numerical(format!("discrepancy {:e} > {ORACLE_TOL:e}", report.max_discrepancy)));
            }
            Ok(Outcome::Ok)
        }
        Command::Synth { config, out, seed, csv } => {
            let cfg = ExperimentConfig::load(&config)?;
            for path in write_synthetic(&cfg.problem, seed, &out, csv)? {
                println!("{}", path.display());
            }
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Numerical(msg)) => {
            eprintln!("{}", serde_json::json!({ "error": "numerical", "code": 3, "message": msg }));
            ExitCode::from(3)
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", serde_json::json!({ "error": kind(&e), "code": code, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
