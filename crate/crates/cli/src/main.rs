//! `tailsgd`: moments, stationary covariance, bounds, simulation, lemma
//! verification and sweeps from a TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 verification failure,
//! 4 numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tailsgd::bounds::{rho_misspec, sigma2_mle, theorem1_bound, RateConstants};
use tailsgd::harness::experiment::{run_experiment_with_workers, simulate_trajectory};
use tailsgd::harness::sweep::{parse_grid, sweep, write_sweep_csv};
use tailsgd::harness::verify::verify_lemmas_with_workers;
use tailsgd::harness::{parse_config, ExperimentConfig};
use tailsgd::stationary::{CovarianceProblem, QuadraticOperatorS, SolveMethod, SolveReport};
use tailsgd::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tailsgd",
    version,
    about = "Tail-averaged SGD for least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment (or grid, for `sweep`) TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    FixedPoint,
    Direct,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// H, Sigma, w*, mu and R^2.
    Moments(Common),
    /// Stationary covariance of the noise-driven process.
    SolveCov {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Direct)]
        method: Method,
    },
    /// Rate constants and the risk bound.
    Bound(Common),
    /// Monte-Carlo risk of the tail average.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the replicate-0 trajectory as CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        record_every: usize,
    },
    /// Runs the invariant suite on one instance.
    Verify(Common),
    /// Runs every cell of a grid and writes one CSV row per cell.
    Sweep(Common),
}

enum Failure {
    Config(String),
    Verification(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = parse_config(&read_text(&common.config)?)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(r) = common.replicates {
        if r < 2 {
            return Err(Failure::Config("--replicates must be at least 2".into()));
        }
        cfg.replicates = r;
    }
    Ok(cfg)
}

fn format_of(common: &Common, cfg: Option<&ExperimentConfig>, default: Format) -> Format {
    common
        .format
        .unwrap_or_else(|| match cfg.and_then(|c| c.outputs.format) {
            Some(tailsgd::harness::OutputFormat::Csv) => Format::Csv,
            Some(tailsgd::harness::OutputFormat::Json) => Format::Json,
            None => default,
        })
}

fn out_path(common: &Common, cfg: Option<&ExperimentConfig>) -> Option<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.outputs.path.as_ref().map(PathBuf::from)))
}

fn emit(path: Option<PathBuf>, bytes: &[u8]) -> CliResult<()> {
    let io_err = |e: io::Error| Failure::Numerical(format!("write failed: {e}"));
    match path {
        Some(p) => fs::write(&p, bytes).map_err(io_err),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes).map_err(io_err)?;
            out.flush().map_err(io_err)
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Failure::Numerical(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn key_values(rows: &[(&str, String)]) -> Vec<u8> {
    let mut s = String::from("quantity,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s.into_bytes()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn cmd_moments(common: &Common) -> CliResult<()> {
    let cfg = load(common)?;
    let m = &cfg.moments;
    let bytes = match format_of(common, Some(&cfg), Format::Json) {
        Format::Json => to_json(m)?,
        Format::Csv => key_values(&[
            ("d", m.dim().to_string()),
            ("mu", format!("{:e}", m.mu())),
            ("R2", format!("{:e}", m.r2())),
            ("trace_H", format!("{:e}", m.h().as_sym().trace())),
            ("sigma2_mle", format!("{:e}", sigma2_mle(m))),
            ("rho_misspec", opt(rho_misspec(m).ok())),
            ("exact", m.is_exact().to_string()),
        ]),
    };
    emit(out_path(common, Some(&cfg)), &bytes)
}

fn cmd_solve(common: &Common, method: Method) -> CliResult<()> {
    let cfg = load(common)?;
    let m = &cfg.moments;
    let s_op = if m.is_exact() {
        QuadraticOperatorS::exact(&cfg.spec)
    } else {
        QuadraticOperatorS::monte_carlo(
            &cfg.spec,
            tailsgd::harness::config::FALLBACK_MOMENT_SAMPLES,
            cfg.seed,
        )?
    };
    let problem = CovarianceProblem::new(m.h().clone(), s_op, m.sigma().clone(), cfg.gamma)?;
    let method = match method {
        Method::FixedPoint => SolveMethod::FixedPoint,
        Method::Direct => SolveMethod::Direct,
    };
    let solution = problem.solve(method)?;
    let report = SolveReport::new(&problem, solution)?;
    let bytes = match format_of(common, Some(&cfg), Format::Json) {
        Format::Json => to_json(&report)?,
        Format::Csv => {
            let mut s = String::new();
            for row in report.solution.c_infty.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            s.into_bytes()
        }
    };
    emit(out_path(common, Some(&cfg)), &bytes)
}

#[derive(Serialize)]
struct BoundOutput {
    rate_constants: RateConstants,
    bound: tailsgd::bounds::RiskBound,
}

fn cmd_bound(common: &Common) -> CliResult<()> {
    let cfg = load(common)?;
    let rc = RateConstants::from_moments(&cfg.moments, cfg.gamma)?;
    let bound = theorem1_bound(&rc, cfg.t, cfg.horizon, cfg.dist0_sq())?;
    let bytes = match format_of(common, Some(&cfg), Format::Json) {
        Format::Json => to_json(&BoundOutput {
            rate_constants: rc,
            bound,
        })?,
        Format::Csv => key_values(&[
            ("gamma", format!("{:e}", rc.gamma)),
            ("t", cfg.t.to_string()),
            ("T", cfg.horizon.to_string()),
            ("sigma2_mle", format!("{:e}", rc.sigma2_mle)),
            ("rho_misspec", opt(rc.rho_misspec)),
            ("R2", format!("{:e}", rc.r2)),
            ("mu", format!("{:e}", rc.mu)),
            ("bias_term", format!("{:e}", bound.bias_term)),
            ("variance_term", format!("{:e}", bound.variance_term)),
            ("total", format!("{:e}", bound.total)),
        ]),
    };
    emit(out_path(common, Some(&cfg)), &bytes)
}

fn cmd_simulate(common: &Common, trajectory: Option<&Path>, record_every: usize) -> CliResult<()> {
    let cfg = load(common)?;
    let report = run_experiment_with_workers(&cfg, common.workers)?;
    if let Some(path) = trajectory {
        let traj = simulate_trajectory(&cfg, record_every)?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &cfg.moments)?;
        emit(Some(path.to_path_buf()), &buf)?;
    }
    let bytes = match format_of(common, Some(&cfg), Format::Json) {
        Format::Json => to_json(&report)?,
        Format::Csv => key_values(&[
            ("replicates", report.replicates.to_string()),
            ("gamma", format!("{:e}", report.gamma)),
            ("t", report.t.to_string()),
            ("T", report.horizon.to_string()),
            ("emp_risk", format!("{:e}", report.risk.mean)),
            ("stderr", format!("{:e}", report.risk.stderr)),
            ("ci_low", format!("{:e}", report.risk.ci_low)),
            ("ci_high", format!("{:e}", report.risk.ci_high)),
            ("bias_risk", format!("{:e}", report.bias_risk.mean)),
            ("variance_risk", format!("{:e}", report.variance_risk.mean)),
            ("bound", format!("{:e}", report.bound.total)),
            ("eff_ratio", opt(report.efficiency_ratio)),
        ]),
    };
    emit(out_path(common, Some(&cfg)), &bytes)
}

fn cmd_verify(common: &Common) -> CliResult<()> {
    let cfg = load(common)?;
    let table = verify_lemmas_with_workers(&cfg, common.workers)?;
    let bytes = match format_of(common, Some(&cfg), Format::Csv) {
        Format::Json => to_json(&table)?,
        Format::Csv => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            buf
        }
    };
    emit(out_path(common, Some(&cfg)), &bytes)?;
    if table.all_passed {
        Ok(())
    } else {
        let names: Vec<&str> = table.failures().map(|r| r.name).collect();
        Err(Failure::Verification(format!(
            "failed checks: {}",
            names.join(", ")
        )))
    }
}

fn cmd_sweep(common: &Common) -> CliResult<()> {
    let mut grid = parse_grid(&read_text(&common.config)?)?;
    if let Some(seed) = common.seed {
        grid.seed = seed;
    }
    if let Some(r) = common.replicates {
        if r < 2 {
            return Err(Failure::Config("--replicates must be at least 2".into()));
        }
        grid.replicates = r;
    }
    let rows = sweep(&grid, common.workers);
    let bytes = match format_of(common, None, Format::Csv) {
        Format::Json => to_json(&rows)?,
        Format::Csv => {
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            buf
        }
    };
    emit(out_path(common, None), &bytes)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Moments(c) => cmd_moments(c),
        Command::SolveCov { common, method } => cmd_solve(common, *method),
        Command::Bound(c) => cmd_bound(c),
        Command::Simulate {
            common,
            trajectory,
            record_every,
        } => cmd_simulate(common, trajectory.as_deref(), *record_every),
        Command::Verify(c) => cmd_verify(c),
        Command::Sweep(c) => cmd_sweep(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(4)
        }
    }
}
