//! Cartesian sweeps over dimension, stepsize rule, horizon and noise family.
//!
//! Grid documents are TOML:
//!
//! ```toml
//! seed = 7
//! replicates = 200
//! [grid]
//! d = [1, 3, 10]
//! gamma_rule = ["half_inv_R2", "half_inv_rho_R2"]
//! T = [1000, 10000]
//! family = ["well_specified", "misspecified"]
//! noise_sigma = 1.0
//! ```
//!
//! Cells are enumerated with `d` outermost, then `family`, `gamma_rule`, `T`.
//! Every cell uses `t = T/2`, `w0 = 0`, `H = diag(1 / (1 + i/2))` and a unit
//! `w*` with alternating signs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bounds::rho_misspec;
use crate::distributions::{DistributionConfig, DistributionKind};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, GammaRule};
use crate::harness::experiment::{run_replicates, summarize, RiskReport};

pub const CSV_HEADER: [&str; 15] = [
    "cell_id",
    "d",
    "gamma",
    "rho",
    "T",
    "t",
    "replicates",
    "seed",
    "emp_risk",
    "stderr",
    "bound",
    "bias_bound",
    "var_bound",
    "eff_ratio",
    "error",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Additive noise independent of `x`.
    WellSpecified,
    /// Noise scaled by `|x|`.
    Misspecified,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    d: Vec<usize>,
    gamma_rule: Vec<String>,
    #[serde(rename = "T")]
    horizons: Vec<usize>,
    family: Vec<Family>,
    #[serde(default = "default_sigma")]
    noise_sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_replicates")]
    replicates: usize,
    grid: RawGrid,
}

fn default_replicates() -> usize {
    crate::harness::config::DEFAULT_REPLICATES
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub seed: u64,
    pub replicates: usize,
    pub d: Vec<usize>,
    pub gamma_rules: Vec<GammaRule>,
    pub horizons: Vec<usize>,
    pub families: Vec<Family>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub cell_id: usize,
    pub d: usize,
    pub family: Family,
    pub gamma_rule: GammaRule,
    pub horizon: usize,
}

pub fn parse_grid(text: &str) -> Result<GridConfig> {
    let raw: RawGridConfig =
        toml::from_str(text).map_err(|e| Error::schema("<document>", e.message().to_string()))?;
    let g = raw.grid;
    for (field, empty) in [
        ("grid.d", g.d.is_empty()),
        ("grid.gamma_rule", g.gamma_rule.is_empty()),
        ("grid.T", g.horizons.is_empty()),
        ("grid.family", g.family.is_empty()),
    ] {
        if empty {
            return Err(Error::schema(field, "must not be empty"));
        }
    }
    if g.d.contains(&0) {
        return Err(Error::schema("grid.d", "dimensions must be positive"));
    }
    if !(g.noise_sigma >= 0.0 && g.noise_sigma.is_finite()) {
        return Err(Error::schema(
            "grid.noise_sigma",
            "must be finite and nonnegative",
        ));
    }
    if raw.replicates < 2 {
        return Err(Error::schema("replicates", "must be at least 2"));
    }
    let gamma_rules = g
        .gamma_rule
        .iter()
        .map(|s| {
            let r: GammaRule = s.parse()?;
            if r == GammaRule::Explicit {
                return Err(Error::schema(
                    "grid.gamma_rule",
                    "explicit stepsizes are not gridded; use frac_inv_R2:<f>",
                ));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridConfig {
        seed: raw.seed,
        replicates: raw.replicates,
        d: g.d,
        gamma_rules,
        horizons: g.horizons,
        families: g.family,
        noise_sigma: g.noise_sigma,
    })
}

impl GridConfig {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &d in &self.d {
            for &family in &self.families {
                for &gamma_rule in &self.gamma_rules {
                    for &horizon in &self.horizons {
                        cells.push(GridCell {
                            cell_id: cells.len(),
                            d,
                            family,
                            gamma_rule,
                            horizon,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn experiment(&self, cell: &GridCell) -> Result<ExperimentConfig> {
        let dist = standard_distribution(cell.family, cell.d, self.noise_sigma);
        ExperimentConfig::from_spec(
            dist,
            cell.gamma_rule,
            None,
            cell.horizon,
            self.replicates,
            self.seed,
        )
    }
}

/// The grid's distribution family in dimension `d`.
pub fn standard_distribution(family: Family, d: usize, noise_sigma: f64) -> DistributionConfig {
    let h: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if i == j {
                        1.0 / (1.0 + i as f64 / 2.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let scale = 1.0 / (d as f64).sqrt();
    let w_star = (0..d)
        .map(|i| if i % 2 == 0 { scale } else { -scale })
        .collect();
    DistributionConfig {
        kind: match family {
            Family::WellSpecified => DistributionKind::GaussianWellSpecified,
            Family::Misspecified => DistributionKind::GaussianMisspecified,
        },
        d: Some(d),
        h: Some(h),
        w_star: Some(w_star),
        noise_sigma,
        misspec_fn: Default::default(),
        support: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell_id: usize,
    pub d: usize,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub t: usize,
    pub replicates: usize,
    pub seed: u64,
    pub emp_risk: Option<f64>,
    pub stderr: Option<f64>,
    pub bound: Option<f64>,
    pub bias_bound: Option<f64>,
    pub var_bound: Option<f64>,
    pub eff_ratio: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<RiskReport>,
}

impl SweepRow {
    fn from_report(cell: &GridCell, cfg: &ExperimentConfig, report: RiskReport) -> Self {
        SweepRow {
            cell_id: cell.cell_id,
            d: cell.d,
            gamma: Some(report.gamma),
            rho: rho_misspec(&cfg.moments).ok(),
            horizon: report.horizon,
            t: report.t,
            replicates: report.replicates,
            seed: report.seed,
            emp_risk: Some(report.risk.mean),
            stderr: Some(report.risk.stderr),
            bound: Some(report.bound.total),
            bias_bound: Some(report.bound.bias_term),
            var_bound: Some(report.bound.variance_term),
            eff_ratio: report.efficiency_ratio,
            error: None,
            report: Some(report),
        }
    }

    fn failed(cell: &GridCell, grid: &GridConfig, gamma: Option<f64>, err: &Error) -> Self {
        SweepRow {
            cell_id: cell.cell_id,
            d: cell.d,
            gamma,
            rho: None,
            horizon: cell.horizon,
            t: cell.horizon / 2,
            replicates: grid.replicates,
            seed: grid.seed,
            emp_risk: None,
            stderr: None,
            bound: None,
            bias_bound: None,
            var_bound: None,
            eff_ratio: None,
            error: Some(err.to_string()),
            report: None,
        }
    }

    fn record(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        vec![
            self.cell_id.to_string(),
            self.d.to_string(),
            f(self.gamma),
            f(self.rho),
            self.horizon.to_string(),
            self.t.to_string(),
            self.replicates.to_string(),
            self.seed.to_string(),
            f(self.emp_risk),
            f(self.stderr),
            f(self.bound),
            f(self.bias_bound),
            f(self.var_bound),
            f(self.eff_ratio),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

fn run_cell(grid: &GridConfig, cell: &GridCell, workers: usize) -> SweepRow {
    let cfg = match grid.experiment(cell) {
        Ok(c) => c,
        Err(e) => return SweepRow::failed(cell, grid, None, &e),
    };
    let result =
        run_replicates(&cfg, cell.cell_id as u64, workers).and_then(|reps| summarize(&cfg, &reps));
    match result {
        Ok(report) => SweepRow::from_report(cell, &cfg, report),
        Err(e) => SweepRow::failed(cell, grid, Some(cfg.gamma), &e),
    }
}

/// Runs every cell in order; replicates inside a cell run on `workers` threads.
pub fn sweep(grid: &GridConfig, workers: usize) -> Vec<SweepRow> {
    grid.cells()
        .iter()
        .map(|c| run_cell(grid, c, workers))
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}
