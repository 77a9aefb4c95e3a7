//! Monte-Carlo estimation of the tail-averaged excess risk.

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{excess_risk_under, sigma2_mle, theorem1_bound, RateConstants, RiskBound};
use crate::distributions::Exactness;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::seeds::derive_seed;
use crate::matcore::SpdMat;
use crate::sgd::{run_process, ProcessKind, Trajectory};

/// Normal quantile for the reported 95% interval.
pub const CI_Z: f64 = 1.96;

/// Running mean and variance, reduced in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl SampleStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = SampleStats::default();
        for &x in xs {
            s.push(x);
        }
        s
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl From<SampleStats> for Estimate {
    fn from(s: SampleStats) -> Self {
        let se = s.stderr();
        Estimate {
            mean: s.mean(),
            stderr: se,
            ci_low: s.mean() - CI_Z * se,
            ci_high: s.mean() + CI_Z * se,
        }
    }
}

/// Per-replicate excess risks of the three matched processes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReplicateRisk {
    pub seed: u64,
    pub full: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskReport {
    pub replicates: usize,
    pub gamma: f64,
    pub t: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    /// Excess risk of the tail average.
    pub risk: Estimate,
    /// Same seeds, labels replaced by `w*.x`.
    pub bias_risk: Estimate,
    /// Same seeds, started at `w*`.
    pub variance_risk: Estimate,
    pub bound: RiskBound,
    pub rate_constants: RateConstants,
    /// `risk * (T - t) / sigma^2_MLE`; absent for noiseless problems.
    pub efficiency_ratio: Option<f64>,
    pub exactness: Exactness,
}

/// Thread pool of `workers` threads; 0 uses the global default.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    Ok(pool.install(f))
}

fn replicate_risk(cfg: &ExperimentConfig, h: &SpdMat, seed: u64) -> Result<ReplicateRisk> {
    let sgd = cfg.sgd_config();
    let w_star = cfg.spec.w_star();
    let risk = |kind| -> Result<f64> {
        let traj = run_process(&cfg.spec, &sgd, seed, kind)?;
        excess_risk_under(&traj.tail_average, w_star, h)
    };
    Ok(ReplicateRisk {
        seed,
        full: risk(ProcessKind::Full)?,
        bias: risk(ProcessKind::Bias)?,
        variance: risk(ProcessKind::Variance)?,
    })
}

/// Runs every replicate of cell `cell`; results come back in replicate order.
pub fn run_replicates(
    cfg: &ExperimentConfig,
    cell: u64,
    workers: usize,
) -> Result<Vec<ReplicateRisk>> {
    cfg.sgd_config().validate(&cfg.spec)?;
    let h = cfg.spec.second_moment();
    with_workers(workers, || {
        (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|r| replicate_risk(cfg, &h, derive_seed(cfg.seed, cell, r)))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Bound and rate constants for `cfg`.
pub fn bound_for(cfg: &ExperimentConfig) -> Result<(RateConstants, RiskBound)> {
    let rc = RateConstants::from_moments(&cfg.moments, cfg.gamma)?;
    let bound = theorem1_bound(&rc, cfg.t, cfg.horizon, cfg.dist0_sq())?;
    Ok((rc, bound))
}

pub fn summarize(cfg: &ExperimentConfig, reps: &[ReplicateRisk]) -> Result<RiskReport> {
    if reps.len() < 2 {
        return Err(Error::TooFewReplicates {
            needed: 2,
            got: reps.len(),
        });
    }
    let (rc, bound) = bound_for(cfg)?;
    let mut full = SampleStats::default();
    let mut bias = SampleStats::default();
    let mut var = SampleStats::default();
    for r in reps {
        full.push(r.full);
        bias.push(r.bias);
        var.push(r.variance);
    }
    let s2 = sigma2_mle(&cfg.moments);
    let window = (cfg.horizon - cfg.t) as f64;
    Ok(RiskReport {
        replicates: reps.len(),
        gamma: cfg.gamma,
        t: cfg.t,
        horizon: cfg.horizon,
        seed: cfg.seed,
        risk: full.into(),
        bias_risk: bias.into(),
        variance_risk: var.into(),
        bound,
        rate_constants: rc,
        efficiency_ratio: (s2 > 0.0).then(|| full.mean() * window / s2),
        exactness: cfg.moments.exactness(),
    })
}

/// Estimates the risk with the default thread pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RiskReport> {
    run_experiment_with_workers(cfg, 0)
}

/// Estimates the risk; the result does not depend on `workers`.
pub fn run_experiment_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<RiskReport> {
    let reps = run_replicates(cfg, 0, workers)?;
    summarize(cfg, &reps)
}

/// One full-process run of replicate 0, recording every `record_every` steps.
pub fn simulate_trajectory(cfg: &ExperimentConfig, record_every: usize) -> Result<Trajectory> {
    let sgd = cfg.sgd_config().with_record_every(record_every.max(1));
    run_process(
        &cfg.spec,
        &sgd,
        derive_seed(cfg.seed, 0, 0),
        ProcessKind::Full,
    )
}
