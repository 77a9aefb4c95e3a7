//! Closed-form rate constants and the risk bound for the tail average.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::distributions::{Exactness, Moments};
use crate::error::{Error, Result};
use crate::matcore::{matrix_norm_under, weighted_norm_sq, SpdMat, Vector};

/// `sigma^2_MLE = (1/2) Tr(H^{-1} Sigma)`.
pub fn sigma2_mle(m: &Moments) -> f64 {
    0.5 * (m.h().inverse() * m.sigma().as_matrix()).trace()
}

/// `rho = d ||Sigma||_H / Tr(H^{-1} Sigma)`. Undefined for noiseless problems.
pub fn rho_misspec(m: &Moments) -> Result<f64> {
    let tr = (m.h().inverse() * m.sigma().as_matrix()).trace();
    if !(tr > 0.0) {
        return Err(Error::ZeroNoise);
    }
    let sigma_h = matrix_norm_under(m.sigma(), m.h())?;
    Ok(m.dim() as f64 * sigma_h / tr)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateConstants {
    pub sigma2_mle: f64,
    /// `None` when `Sigma = 0`.
    pub rho_misspec: Option<f64>,
    pub d: usize,
    #[serde(rename = "R2")]
    pub r2: f64,
    pub mu: f64,
    pub gamma: f64,
    pub exactness: Exactness,
}

impl RateConstants {
    pub fn from_moments(m: &Moments, gamma: f64) -> Result<Self> {
        let rho = match rho_misspec(m) {
            Ok(r) => Some(r),
            Err(Error::ZeroNoise) => None,
            Err(e) => return Err(e),
        };
        Ok(RateConstants {
            sigma2_mle: sigma2_mle(m),
            rho_misspec: rho,
            d: m.dim(),
            r2: m.r2(),
            mu: m.mu(),
            gamma,
            exactness: m.exactness(),
        })
    }
}

/// `(1/2) exp(-gamma mu t) R^2 ||w0 - w*||^2`.
pub fn bias_term(gamma: f64, mu: f64, t: usize, r2: f64, dist0_sq: f64) -> f64 {
    0.5 * (-gamma * mu * t as f64).exp() * r2 * dist0_sq
}

/// `(1 + rho gamma R^2 / (1 - gamma R^2)) sigma^2_MLE / (T - t)`.
pub fn variance_term(gamma: f64, r2: f64, rho: f64, sigma2_mle: f64, window: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma * r2 < 1.0) {
        return Err(Error::StepSizeTooLarge {
            gamma,
            limit: 1.0 / r2,
        });
    }
    if window == 0 {
        return Err(Error::EmptyAverageWindow { t: 0, horizon: 0 });
    }
    let gr = gamma * r2;
    Ok((1.0 + gr / (1.0 - gr) * rho) * sigma2_mle / window as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskBound {
    pub bias_term: f64,
    pub variance_term: f64,
    /// `(sqrt(bias) + sqrt(variance))^2`.
    pub total: f64,
    pub t: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub gamma: f64,
    pub dist0_sq: f64,
}

/// The full bound on `E[L(w_bar_{t:T})] - L(w*)`.
pub fn theorem1_bound(
    rc: &RateConstants,
    t: usize,
    horizon: usize,
    dist0_sq: f64,
) -> Result<RiskBound> {
    if t >= horizon {
        return Err(Error::EmptyAverageWindow { t, horizon });
    }
    let bias = bias_term(rc.gamma, rc.mu, t, rc.r2, dist0_sq);
    // rho only multiplies sigma2_mle, which is zero whenever rho is undefined
    let rho = rc.rho_misspec.unwrap_or(1.0);
    let var = variance_term(rc.gamma, rc.r2, rho, rc.sigma2_mle, horizon - t)?;
    let total = (bias.sqrt() + var.sqrt()).powi(2);
    Ok(RiskBound {
        bias_term: bias,
        variance_term: var,
        total,
        t,
        horizon,
        gamma: rc.gamma,
        dist0_sq,
    })
}

/// `Tr(C_infty) / (gamma T)`, bounding `(1/2) E||w_bar_T - w*||_H^2` for the
/// noise-driven process.
pub fn variance_of_average_bound(c_infty_trace: f64, gamma: f64, horizon: usize) -> f64 {
    c_infty_trace / (gamma * horizon as f64)
}

/// `L(w) - L(w*) = (1/2) ||w - w*||_H^2`.
pub fn excess_risk(w: &Vector, m: &Moments) -> Result<f64> {
    excess_risk_under(w, m.w_star(), m.h())
}

pub(crate) fn excess_risk_under(w: &Vector, w_star: &Vector, h: &SpdMat) -> Result<f64> {
    if w.len() != w_star.len() {
        return Err(Error::DimensionMismatch {
            expected: w_star.len(),
            got: w.len(),
        });
    }
    Ok(0.5 * weighted_norm_sq(&(w - w_star), h)?)
}

/// Least-squares fit from the normal equations `(X^T X) w = X^T y`.
pub fn mle_fit(samples: &[(Vector, f64)]) -> Result<Vector> {
    let d = samples
        .first()
        .map(|(x, _)| x.len())
        .ok_or(Error::SingularEmpiricalH)?;
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = Vector::zeros(d);
    for (x, y) in samples {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        gram.syger(1.0, x, x, 1.0);
        rhs.axpy(*y, x, 1.0);
    }
    solve_normal_equations(gram, rhs)
}

/// Solves `G w = b` for a Gram matrix `G`, rejecting numerically singular ones.
pub(crate) fn solve_normal_equations(mut gram: DMatrix<f64>, rhs: Vector) -> Result<Vector> {
    let d = gram.nrows();
    // syger only fills the lower triangle
    for j in 0..d {
        for i in 0..j {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let max_diag = gram.diagonal().amax();
    let chol = gram.cholesky().ok_or(Error::SingularEmpiricalH)?;
    let l_diag = chol.l_dirty().diagonal();
    let min_pivot = l_diag.iter().fold(f64::INFINITY, |a, v| a.min(v * v));
    if !(min_pivot > 1e-12 * max_diag) {
        return Err(Error::SingularEmpiricalH);
    }
    Ok(chol.solve(&rhs))
}
