//! Lemma-verification suite: one named check per invariant, with margins.

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{
    rho_misspec, sigma2_mle, theorem1_bound, variance_of_average_bound, variance_term,
    RateConstants,
};
use crate::distributions::{exact_moments, DistributionKind, DistributionSpec, Moments};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{run_experiment_with_workers, with_workers, SampleStats};
use crate::harness::seeds::derive_seed;
use crate::matcore::{psd_order_leq, SymMat, Vector};
use crate::sgd::{run_process_with, ProcessKind, SgdConfig};
use crate::stationary::{
    apply_t_tilde, t_tilde_inverse_series, CovarianceProblem, QuadraticOperatorS,
};

pub const SOLVER_TOL: f64 = 1e-12;
pub const AGREEMENT_TOL: f64 = 1e-8;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const MONOTONE_TOL: f64 = 1e-12;
pub const BOUND_SLACK: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const RECURSION_STEPS: usize = 1000;
pub const SERIES_TERMS: usize = 200;
/// Steps at which the bias-process distance is compared with its envelope.
pub const BIAS_STEPS: [usize; 3] = [10, 100, 1000];
/// Standard errors allowed on the per-coordinate mean recursion.
pub const MEAN_Z: f64 = 4.0;
/// Samples for the Monte-Carlo check of the closed-form operator.
pub const S_MC_SAMPLES: usize = 200_000;
pub const S_MC_Z: f64 = 4.0;
/// Per-coordinate round-off allowance, in ulps, on the bias envelope.
pub const ROUNDOFF_ULPS: f64 = 16.0;

/// Distinct cell indices so lemma streams never reuse experiment streams.
const CELL_BIAS: u64 = 1 << 40;
const CELL_S_MC: u64 = (1 << 40) + 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    /// Distance to the threshold; nonnegative when passing.
    pub margin: f64,
    pub detail: String,
}

impl CheckRow {
    fn le(name: &'static str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        CheckRow {
            name,
            passed: measured <= threshold,
            measured,
            threshold,
            margin: threshold - measured,
            detail: detail.into(),
        }
    }

    fn ge(name: &'static str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        CheckRow {
            name,
            passed: measured >= threshold,
            measured,
            threshold,
            margin: measured - threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationTable {
    pub rows: Vec<CheckRow>,
    pub all_passed: bool,
}

impl VerificationTable {
    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "name",
            "passed",
            "measured",
            "threshold",
            "margin",
            "detail",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.name.to_string(),
                r.passed.to_string(),
                format!("{:e}", r.measured),
                format!("{:e}", r.threshold),
                format!("{:e}", r.margin),
                r.detail.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rel_diff(a: &SymMat, b: &SymMat) -> f64 {
    let diff = (a - b).frobenius_norm();
    let scale = b.frobenius_norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn moment_checks(m: &Moments, rows: &mut Vec<CheckRow>) -> Result<()> {
    let h = m.h();
    let r2 = m.r2();
    let fourth = m.fourth_moment();
    let scaled = |c: f64| SymMat::symmetrized(h.as_matrix() * (c * r2));
    let holds = psd_order_leq(fourth, &scaled(1.0), 1e-10)?;
    rows.push(CheckRow {
        name: "r2_dominates_fourth_moment",
        passed: holds,
        measured: if holds { 0.0 } else { 1.0 },
        threshold: 0.0,
        margin: if holds { 0.0 } else { -1.0 },
        detail: "E[|x|^2 xx^T] <= R^2 H".into(),
    });
    let tight = !psd_order_leq(fourth, &scaled(0.99), 0.0)?;
    rows.push(CheckRow {
        name: "r2_is_minimal",
        passed: tight,
        measured: if tight { 0.0 } else { 1.0 },
        threshold: 0.0,
        margin: if tight { 0.0 } else { -1.0 },
        detail: "E[|x|^2 xx^T] not <= 0.99 R^2 H".into(),
    });
    rows.push(CheckRow::le(
        "trace_h_le_r2",
        h.as_sym().trace(),
        r2 * (1.0 + IDENTITY_TOL),
        "Tr(H) <= R^2",
    ));
    match rho_misspec(m) {
        Ok(rho) => rows.push(CheckRow::ge(
            "rho_at_least_one",
            rho,
            1.0 - 1e-12,
            "rho_misspec >= 1",
        )),
        Err(Error::ZeroNoise) => rows.push(CheckRow::le(
            "rho_at_least_one",
            0.0,
            0.0,
            "noiseless; rho undefined",
        )),
        Err(e) => return Err(e),
    }
    Ok(())
}

fn stationary_checks(cfg: &ExperimentConfig, m: &Moments, rows: &mut Vec<CheckRow>) -> Result<()> {
    let gamma = cfg.gamma;
    let h = m.h();
    let s_op = QuadraticOperatorS::exact(&cfg.spec);
    let problem = CovarianceProblem::new(h.clone(), s_op.clone(), m.sigma().clone(), gamma)?;
    let fp = problem.solve_fixed_point(SOLVER_TOL, crate::stationary::DEFAULT_MAX_ITER)?;
    let direct = problem.solve_direct()?;
    let c = &direct.c_infty;

    rows.push(CheckRow::le(
        "solvers_agree",
        rel_diff(&fp.c_infty, c),
        AGREEMENT_TOL,
        format!(
            "fixed-point ({} iterations) vs direct, relative Frobenius",
            fp.iterations.unwrap_or(0)
        ),
    ));
    let forcing = (m.sigma() * gamma).frobenius_norm().max(f64::MIN_POSITIVE);
    rows.push(CheckRow::le(
        "fixed_point_residual",
        fp.residual / forcing,
        RESIDUAL_TOL,
        "|T C - gamma S C - gamma Sigma|_F / |gamma Sigma|_F",
    ));
    rows.push(CheckRow::le(
        "direct_residual",
        direct.residual / forcing,
        RESIDUAL_TOL,
        "|T C - gamma S C - gamma Sigma|_F / |gamma Sigma|_F",
    ));

    // monotone recursion from C_0 = 0
    let traj = problem.trajectory(RECURSION_STEPS)?;
    let mut worst_step = f64::INFINITY;
    let mut max_trace = 0.0_f64;
    for pair in traj.windows(2) {
        worst_step = worst_step.min((&pair[1] - &pair[0]).min_eigenvalue());
        max_trace = max_trace.max(pair[1].trace());
    }
    rows.push(CheckRow::le(
        "recursion_monotone",
        -worst_step,
        MONOTONE_TOL,
        format!("min eig(C_(t+1) - C_t) over {RECURSION_STEPS} steps"),
    ));
    rows.push(CheckRow::le(
        "recursion_trace_bounded",
        max_trace,
        gamma * m.sigma().trace() / m.mu() + BOUND_SLACK,
        "Tr(C_t) <= gamma Tr(Sigma) / mu",
    ));
    rows.push(CheckRow::le(
        "recursion_below_limit",
        traj.last()
            .map(|last| (last - c).max_eigenvalue())
            .unwrap_or(0.0),
        PSD_SLACK * (1.0 + c.spectral_norm()),
        "C_t <= C_infty",
    ));

    let crude = problem.crude_bound()?;
    rows.push(CheckRow::le(
        "crude_bound",
        c.max_eigenvalue(),
        crude + BOUND_SLACK,
        "lambda_max(C_infty) <= gamma |Sigma|_H / (1 - gamma R^2)",
    ));
    let refined = problem.refined_trace_bound()?;
    rows.push(CheckRow::le(
        "refined_trace_bound",
        c.trace(),
        refined + BOUND_SLACK,
        "Tr(C_infty) <= refined bound",
    ));

    let s_c = s_op.apply(c)?;
    let via_fourth = c.trace_inner(m.fourth_moment())?;
    let scale = via_fourth.abs().max(f64::MIN_POSITIVE);
    rows.push(CheckRow::le(
        "s_trace_identity",
        (s_c.trace() - via_fourth).abs() / scale,
        1e-10,
        "Tr(S C) = Tr(C E[|x|^2 xx^T])",
    ));
    rows.push(CheckRow::le(
        "s_trace_le_r2",
        s_c.trace(),
        m.r2() * c.trace_inner(h.as_sym())? * (1.0 + IDENTITY_TOL) + BOUND_SLACK,
        "Tr(S C) <= R^2 Tr(C H)",
    ));

    // truncated series for the inverse of T~: T~(S_K) = M - (I - gamma H)^K M (I - gamma H)^K
    let target = if m.sigma().frobenius_norm() > 0.0 {
        m.sigma().clone()
    } else {
        SymMat::identity(m.dim())
    };
    let series = t_tilde_inverse_series(&target, h, gamma, SERIES_TERMS)?;
    let err = (&apply_t_tilde(&series, h, gamma)? - &target).spectral_norm();
    let contraction = (1.0 - gamma * m.mu())
        .abs()
        .max((1.0 - gamma * h.max_eigenvalue()).abs());
    let envelope = contraction.powi(2 * SERIES_TERMS as i32) * target.spectral_norm();
    rows.push(CheckRow::le(
        "t_tilde_series_remainder",
        err,
        envelope + 1e-12 * target.spectral_norm(),
        format!("{SERIES_TERMS} terms"),
    ));

    let rc = RateConstants::from_moments(m, gamma)?;
    let window = cfg.horizon - cfg.t;
    let rho = rc.rho_misspec.unwrap_or(1.0);
    let var_term = variance_term(gamma, m.r2(), rho, sigma2_mle(m), window)?;
    let via_refined = variance_of_average_bound(refined, gamma, window);
    let scale = var_term.abs().max(f64::MIN_POSITIVE);
    rows.push(CheckRow::le(
        "variance_term_from_refined_bound",
        (via_refined - var_term).abs() / scale,
        IDENTITY_TOL,
        "refined bound / (gamma (T - t)) equals the variance term",
    ));
    Ok(())
}

const PSD_SLACK: f64 = 1e-9;

/// Per-replicate snapshots of `w_k - w*` for the bias and full processes.
fn lemma_snapshots(
    cfg: &ExperimentConfig,
    steps: &[usize],
    workers: usize,
) -> Result<Vec<(Vec<f64>, Vec<Vector>)>> {
    let horizon = steps.iter().copied().max().unwrap_or(0) + 1;
    let sgd = SgdConfig::new(cfg.gamma, cfg.w0.clone(), 0, horizon);
    let w_star = cfg.spec.w_star().clone();
    with_workers(workers, || {
        (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|r| {
                let seed = derive_seed(cfg.seed, CELL_BIAS, r);
                let mut dist = vec![0.0; steps.len()];
                run_process_with(&cfg.spec, &sgd, seed, ProcessKind::Bias, |k, w| {
                    if let Some(i) = steps.iter().position(|&s| s == k) {
                        dist[i] = w
                            .iter()
                            .zip(w_star.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                    }
                })?;
                let mut errs = vec![Vector::zeros(w_star.len()); steps.len()];
                run_process_with(&cfg.spec, &sgd, seed, ProcessKind::Full, |k, w| {
                    if let Some(i) = steps.iter().position(|&s| s == k) {
                        errs[i] = Vector::from_iterator(
                            w.len(),
                            w.iter().zip(w_star.iter()).map(|(a, b)| a - b),
                        );
                    }
                })?;
                Ok((dist, errs))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

fn monte_carlo_checks(
    cfg: &ExperimentConfig,
    m: &Moments,
    workers: usize,
    rows: &mut Vec<CheckRow>,
) -> Result<()> {
    let steps: Vec<usize> = BIAS_STEPS.to_vec();
    let snaps = lemma_snapshots(cfg, &steps, workers)?;
    let dist0 = cfg.dist0_sq();
    let d = m.dim();
    let contraction =
        SymMat::symmetrized(nalgebra::DMatrix::identity(d, d) - m.h().as_matrix() * cfg.gamma);
    let e0 = &cfg.w0 - cfg.spec.w_star();
    // iterates stall within a few ulps of w* once the envelope underflows
    let ulp = ROUNDOFF_ULPS * f64::EPSILON * (1.0 + cfg.spec.w_star().amax().max(cfg.w0.amax()));
    let roundoff = d as f64 * ulp * ulp;
    for (i, &k) in steps.iter().enumerate() {
        let stats =
            SampleStats::from_slice(&snaps.iter().map(|(dist, _)| dist[i]).collect::<Vec<_>>());
        let envelope = (-cfg.gamma * m.mu() * k as f64).exp() * dist0 + roundoff;
        rows.push(CheckRow::le(
            "bias_contraction",
            stats.mean() - 2.0 * stats.stderr(),
            envelope,
            format!("t = {k}: mean |w_t - w*|^2 - 2 se <= exp(-gamma mu t) |w0 - w*|^2"),
        ));

        let mut predicted = e0.clone();
        for _ in 0..k {
            predicted = contraction.as_matrix() * predicted;
        }
        let mut worst = f64::NEG_INFINITY;
        for j in 0..d {
            let s =
                SampleStats::from_slice(&snaps.iter().map(|(_, e)| e[i][j]).collect::<Vec<_>>());
            let gap = (s.mean() - predicted[j]).abs() - MEAN_Z * s.stderr() - 1e-12;
            worst = worst.max(gap);
        }
        rows.push(CheckRow::le(
            "mean_recursion",
            worst,
            0.0,
            format!("t = {k}: E[w_t - w*] = (I - gamma H)^t (w0 - w*) within {MEAN_Z} se"),
        ));
    }

    if cfg.spec.kind() != DistributionKind::DiscreteSupport {
        let n = S_MC_SAMPLES;
        let worst = gaussian_s_zscore(
            &cfg.spec,
            &SymMat::identity(d),
            n,
            derive_seed(cfg.seed, CELL_S_MC, 0),
        )?;
        rows.push(CheckRow::le(
            "gaussian_s_matches_monte_carlo",
            worst,
            S_MC_Z,
            format!("S(I) closed form vs {n} samples, max entrywise |z|"),
        ));
    }

    let report = run_experiment_with_workers(cfg, workers)?;
    let rc = RateConstants::from_moments(m, cfg.gamma)?;
    let bound = theorem1_bound(&rc, cfg.t, cfg.horizon, cfg.dist0_sq())?;
    rows.push(CheckRow::le(
        "tail_average_risk_bound",
        report.risk.mean - crate::harness::experiment::CI_Z * report.risk.stderr,
        bound.total,
        format!(
            "{} replicates, T = {}, t = {}",
            cfg.replicates, cfg.horizon, cfg.t
        ),
    ));
    Ok(())
}

/// Largest entrywise z-score of the closed-form `S(probe)` against a sample
/// mean of `(x^T probe x) x x^T`.
pub fn gaussian_s_zscore(
    spec: &DistributionSpec,
    probe: &SymMat,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let d = spec.dim();
    if probe.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: probe.dim(),
        });
    }
    let closed = QuadraticOperatorS::gaussian(spec.second_moment()).apply(probe)?;
    let mut stream = spec.stream(seed);
    let mut stats = vec![SampleStats::default(); d * d];
    let mut x = vec![0.0; d];
    for _ in 0..n {
        stream.next_into(&mut x);
        let xv = Vector::from_column_slice(&x);
        let q = probe.quad_form(&xv)?;
        for i in 0..d {
            for j in i..d {
                stats[i * d + j].push(q * x[i] * x[j]);
            }
        }
    }
    let mut worst = 0.0_f64;
    for i in 0..d {
        for j in i..d {
            let s = &stats[i * d + j];
            let gap = (s.mean() - closed.get(i, j)).abs();
            let z = if s.stderr() > 0.0 {
                gap / s.stderr()
            } else if gap > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(z);
        }
    }
    Ok(worst)
}

/// Runs every check on `cfg`. Requires exact moments.
pub fn verify_lemmas(cfg: &ExperimentConfig) -> Result<VerificationTable> {
    verify_lemmas_with_workers(cfg, 0)
}

pub fn verify_lemmas_with_workers(
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<VerificationTable> {
    let m = exact_moments(&cfg.spec)?;
    let mut rows = Vec::new();
    moment_checks(&m, &mut rows)?;
    stationary_checks(cfg, &m, &mut rows)?;
    monte_carlo_checks(cfg, &m, workers, &mut rows)?;
    let all_passed = rows.iter().all(|r| r.passed);
    Ok(VerificationTable { rows, all_passed })
}
