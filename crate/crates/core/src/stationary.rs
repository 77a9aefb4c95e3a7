//! Linear operators on symmetric matrices and the stationary covariance of
//! the noise-driven SGD process.
//!
//! Started at `w*`, the iterate covariance follows
//! `C' = C - gamma (H C + C H) + gamma^2 S(C) + gamma^2 Sigma` with
//! `S(M) = E[(x^T M x) x x^T]`. Its limit solves
//! `T(C) = gamma S(C) + gamma Sigma`, `T(M) = H M + M H`. Two solvers are
//! provided: iterating the recursion from zero, and a dense solve in the
//! `d(d+1)/2`-dimensional sym-vec coordinates.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{DistributionSpec, ESTIMATED_R2_MARGIN};
use crate::error::{Error, Result};
use crate::matcore::{matrix_norm_under, serialize_vector, SpdMat, SymMat, SymVecIndex, Vector};

/// Default relative tolerance of the fixed-point solver.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap of the fixed-point solver.
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Relative tolerance below which a negative eigenvalue of a solution is
/// treated as round-off.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
enum Backing {
    Gaussian(SpdMat),
    Discrete(Vec<(Vector, f64)>),
    /// Sym-vec representation `E[u u^T]`, `u = svec(x x^T)`, from samples.
    MonteCarlo {
        repr: DMatrix<f64>,
        n: usize,
        seed: u64,
    },
}

/// `S(M) = E[(x^T M x) x x^T]`.
#[derive(Clone, Debug)]
pub struct QuadraticOperatorS {
    d: usize,
    backing: Backing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SBackingKind {
    ExactGaussian,
    ExactDiscrete,
    MonteCarlo,
}

impl QuadraticOperatorS {
    /// Closed form for `x ~ N(0, H)`: `S(M) = 2 H M H + Tr(M H) H`.
    pub fn gaussian(h: SpdMat) -> Self {
        QuadraticOperatorS {
            d: h.dim(),
            backing: Backing::Gaussian(h),
        }
    }

    /// Enumeration over `(x_i, p_i)` atoms.
    pub fn discrete(atoms: Vec<(Vector, f64)>) -> Result<Self> {
        let d = atoms
            .first()
            .map(|(x, _)| x.len())
            .ok_or_else(|| Error::InvalidSpec("empty support".into()))?;
        if let Some((x, _)) = atoms.iter().find(|(x, _)| x.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(QuadraticOperatorS {
            d,
            backing: Backing::Discrete(atoms),
        })
    }

    /// Exact backing for `spec`. Every family has one, since `S` only
    /// depends on the law of `x`.
    pub fn exact(spec: &DistributionSpec) -> Self {
        match spec.atoms_for_operator() {
            Some(atoms) => QuadraticOperatorS {
                d: spec.dim(),
                backing: Backing::Discrete(atoms),
            },
            None => QuadraticOperatorS::gaussian(spec.second_moment()),
        }
    }

    /// Empirical backing from `n` draws of `x`.
    pub fn monte_carlo(spec: &DistributionSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSpec(
                "monte-carlo backing needs n >= 1".into(),
            ));
        }
        let d = spec.dim();
        let idx = SymVecIndex::new(d);
        let m = idx.len();
        let mut stream = spec.stream(seed);
        let mut x = vec![0.0; d];
        let mut u = vec![0.0; m];
        let mut acc = DMatrix::<f64>::zeros(m, m);
        for _ in 0..n {
            stream.next_into(&mut x);
            svec_outer(&idx, &x, &mut u);
            for j in 0..m {
                for i in j..m {
                    acc[(i, j)] += u[i] * u[j];
                }
            }
        }
        for j in 0..m {
            for i in 0..j {
                acc[(i, j)] = acc[(j, i)];
            }
        }
        Ok(QuadraticOperatorS {
            d,
            backing: Backing::MonteCarlo {
                repr: acc / n as f64,
                n,
                seed,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> SBackingKind {
        match self.backing {
            Backing::Gaussian(_) => SBackingKind::ExactGaussian,
            Backing::Discrete(_) => SBackingKind::ExactDiscrete,
            Backing::MonteCarlo { .. } => SBackingKind::MonteCarlo,
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.backing, Backing::MonteCarlo { .. })
    }

    /// Sample size and seed of a Monte-Carlo backing.
    pub fn monte_carlo_params(&self) -> Option<(usize, u64)> {
        match self.backing {
            Backing::MonteCarlo { n, seed, .. } => Some((n, seed)),
            _ => None,
        }
    }

    pub fn apply(&self, m: &SymMat) -> Result<SymMat> {
        if m.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: m.dim(),
            });
        }
        Ok(match &self.backing {
            Backing::Gaussian(h) => {
                let hm = h.as_matrix();
                let hmh = hm * m.as_matrix() * hm;
                let tr = m.trace_inner(h.as_sym())?;
                SymMat::symmetrized(hmh * 2.0 + hm * tr)
            }
            Backing::Discrete(atoms) => {
                let mut acc = DMatrix::zeros(self.d, self.d);
                for (x, p) in atoms {
                    let q = m.quad_form(x)?;
                    acc += x * x.transpose() * (p * q);
                }
                SymMat::symmetrized(acc)
            }
            Backing::MonteCarlo { repr, .. } => {
                let idx = SymVecIndex::new(self.d);
                idx.to_sym(&(repr * idx.to_vec(m)?))?
            }
        })
    }

    /// Matrix of the operator in sym-vec coordinates.
    pub fn matrix_repr(&self) -> DMatrix<f64> {
        match &self.backing {
            Backing::MonteCarlo { repr, .. } => repr.clone(),
            _ => operator_matrix(self.d, |m| self.apply(m).expect("dimension checked")),
        }
    }

    /// `R^2 = ||S(I)||_H`, since `S(I) = E[||x||^2 x x^T]`.
    pub fn r2(&self, h: &SpdMat) -> Result<f64> {
        matrix_norm_under(&self.apply(&SymMat::identity(self.d))?, h)
    }
}

/// `svec(x x^T)`, written into `out`.
fn svec_outer(idx: &SymVecIndex, x: &[f64], out: &mut [f64]) {
    let d = idx.dim();
    for i in 0..d {
        out[i] = x[i] * x[i];
    }
    let mut k = d;
    for i in 0..d {
        for j in (i + 1)..d {
            out[k] = std::f64::consts::SQRT_2 * x[i] * x[j];
            k += 1;
        }
    }
}

/// Builds the sym-vec matrix of a linear map on symmetric matrices by
/// applying it to each basis element.
pub fn operator_matrix<F>(d: usize, f: F) -> DMatrix<f64>
where
    F: Fn(&SymMat) -> SymMat + Sync,
{
    let idx = SymVecIndex::new(d);
    let cols: Vec<Vector> = (0..idx.len())
        .into_par_iter()
        .map(|k| idx.to_vec(&f(&idx.basis(k))).expect("dimension preserved"))
        .collect();
    DMatrix::from_columns(&cols)
}

fn check_dims(h: &SpdMat, m: &SymMat) -> Result<()> {
    if h.dim() == m.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: h.dim(),
            got: m.dim(),
        })
    }
}

/// `T(M) = H M + M H`.
pub fn apply_t(m: &SymMat, h: &SpdMat) -> Result<SymMat> {
    check_dims(h, m)?;
    let hm = h.as_matrix() * m.as_matrix();
    Ok(SymMat::symmetrized(&hm + hm.transpose()))
}

/// `T~(M) = H M + M H - gamma H M H`.
pub fn apply_t_tilde(m: &SymMat, h: &SpdMat, gamma: f64) -> Result<SymMat> {
    check_dims(h, m)?;
    let hmat = h.as_matrix();
    let hm = hmat * m.as_matrix();
    let hmh = &hm * hmat;
    Ok(SymMat::symmetrized(&hm + hm.transpose() - hmh * gamma))
}

/// Truncated series `gamma sum_{k<K} (I - gamma H)^k M (I - gamma H)^k`,
/// which converges to `T~^{-1}(M)`.
pub fn t_tilde_inverse_series(m: &SymMat, h: &SpdMat, gamma: f64, terms: usize) -> Result<SymMat> {
    check_dims(h, m)?;
    let d = h.dim();
    let contraction = DMatrix::identity(d, d) - h.as_matrix() * gamma;
    let mut term = m.as_matrix().clone();
    let mut acc = DMatrix::zeros(d, d);
    for _ in 0..terms {
        acc += &term;
        term = &contraction * term * &contraction;
    }
    Ok(SymMat::symmetrized(acc * gamma))
}

/// The stationary-covariance equation for one `(H, S, Sigma, gamma)`.
#[derive(Clone, Debug)]
pub struct CovarianceProblem {
    h: SpdMat,
    s_op: QuadraticOperatorS,
    sigma: SymMat,
    gamma: f64,
    r2: f64,
}

impl CovarianceProblem {
    /// Validates dimensions, `Sigma >= 0` and the stepsize gate `gamma < 1/R^2`, with `R^2`
    /// read off the operator (5% margin for a Monte-Carlo backing).
    pub fn new(h: SpdMat, s_op: QuadraticOperatorS, sigma: SymMat, gamma: f64) -> Result<Self> {
        for got in [s_op.dim(), sigma.dim()] {
            if got != h.dim() {
                return Err(Error::DimensionMismatch {
                    expected: h.dim(),
                    got,
                });
            }
        }
        if !sigma.is_psd(PSD_TOL) {
            return Err(Error::NotPositiveSemidefinite(sigma.min_eigenvalue()));
        }
        let r2 = s_op.r2(&h)?;
        let limit = if s_op.is_exact() {
            1.0 / r2
        } else {
            1.0 / (ESTIMATED_R2_MARGIN * r2)
        };
        if !(gamma > 0.0 && gamma < limit) {
            return Err(Error::StepSizeTooLarge { gamma, limit });
        }
        Ok(CovarianceProblem {
            h,
            s_op,
            sigma,
            gamma,
            r2,
        })
    }

    pub fn h(&self) -> &SpdMat {
        &self.h
    }

    pub fn sigma(&self) -> &SymMat {
        &self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn operator(&self) -> &QuadraticOperatorS {
        &self.s_op
    }

    /// One step of the exact covariance recursion.
    pub fn step(&self, c: &SymMat) -> Result<SymMat> {
        let g = self.gamma;
        let t = apply_t(c, &self.h)?;
        let s = self.s_op.apply(c)?;
        Ok(SymMat::symmetrized(
            c.as_matrix() - t.as_matrix() * g + (s.as_matrix() + self.sigma.as_matrix()) * (g * g),
        ))
    }

    /// `C_0 = 0, C_1, ..., C_steps`.
    pub fn trajectory(&self, steps: usize) -> Result<Vec<SymMat>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(SymMat::zeros(self.h.dim()));
        for k in 0..steps {
            let next = self.step(&out[k])?;
            out.push(next);
        }
        Ok(out)
    }

    /// `||T(C) - gamma S(C) - gamma Sigma||_F`.
    pub fn residual(&self, c: &SymMat) -> Result<f64> {
        let t = apply_t(c, &self.h)?;
        let s = self.s_op.apply(c)?;
        Ok((t.as_matrix() - (s.as_matrix() + self.sigma.as_matrix()) * self.gamma).norm())
    }

    /// Iterates the recursion from `C_0 = 0`.
    ///
    /// Convergence is linear with ratio roughly `1 - gamma mu`, so expect
    /// about `ln(1/tol) / (gamma mu)` iterations. The loop stops once the
    /// extrapolated remaining error `||dC|| * r / (1 - r)`, with `r` the
    /// observed ratio of successive step sizes, is below `tol * ||C||_F`.
    pub fn solve_fixed_point(&self, tol: f64, max_iter: usize) -> Result<StationarySolution> {
        let mut c = SymMat::zeros(self.h.dim());
        let mut prev_step = f64::INFINITY;
        for k in 1..=max_iter {
            let next = self.step(&c)?;
            let step = (next.as_matrix() - c.as_matrix()).norm();
            let scale = next.frobenius_norm();
            c = next;
            if step == 0.0 {
                return self.finish_fixed_point(c, k, 0.0);
            }
            let ratio = step / prev_step;
            prev_step = step;
            if ratio < 1.0 {
                let remaining = step * (ratio / (1.0 - ratio)).max(1.0);
                if remaining <= tol * scale {
                    return self.finish_fixed_point(c, k, remaining / scale);
                }
            }
        }
        Err(Error::NonConvergence(max_iter))
    }

    fn finish_fixed_point(
        &self,
        c: SymMat,
        iterations: usize,
        est_rel_error: f64,
    ) -> Result<StationarySolution> {
        let residual = self.residual(&c)?;
        Ok(StationarySolution {
            residual,
            method: SolveMethod::FixedPoint,
            iterations: Some(iterations),
            estimated_relative_error: Some(est_rel_error),
            pivot_ratio: None,
            exact_backing: self.s_op.is_exact(),
            c_infty: c,
        })
    }

    /// Dense solve of `(T - gamma S) svec(C) = gamma svec(Sigma)`.
    pub fn solve_direct(&self) -> Result<StationarySolution> {
        let d = self.h.dim();
        let idx = SymVecIndex::new(d);
        let t_mat = operator_matrix(d, |m| apply_t(m, &self.h).expect("dimension checked"));
        let a = t_mat - self.s_op.matrix_repr() * self.gamma;
        let b = idx.to_vec(&self.sigma)? * self.gamma;
        let lu = a.lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max_pivot = diag.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let min_pivot = diag.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        let pivot_ratio = if max_pivot > 0.0 {
            min_pivot / max_pivot
        } else {
            0.0
        };
        if !(pivot_ratio > 1e-14) {
            return Err(Error::SingularSystem);
        }
        let sol = lu.solve(&b).ok_or(Error::SingularSystem)?;
        let c = project_psd(idx.to_sym(&sol)?)?;
        let residual = self.residual(&c)?;
        Ok(StationarySolution {
            c_infty: c,
            method: SolveMethod::Direct,
            iterations: None,
            estimated_relative_error: None,
            pivot_ratio: Some(pivot_ratio),
            residual,
            exact_backing: self.s_op.is_exact(),
        })
    }

    pub fn solve(&self, method: SolveMethod) -> Result<StationarySolution> {
        match method {
            SolveMethod::FixedPoint => self.solve_fixed_point(DEFAULT_TOL, DEFAULT_MAX_ITER),
            SolveMethod::Direct => self.solve_direct(),
        }
    }

    pub fn crude_bound(&self) -> Result<f64> {
        crude_bound(&self.sigma, &self.h, self.gamma, self.r2)
    }

    pub fn refined_trace_bound(&self) -> Result<f64> {
        refined_trace_bound(&self.sigma, &self.h, self.gamma, self.r2, self.h.dim())
    }
}

/// Clips round-off negative eigenvalues; anything below `-PSD_TOL` relative
/// is reported as an error.
fn project_psd(c: SymMat) -> Result<SymMat> {
    let d = c.dim();
    let eig = SymmetricEigen::new(c.as_matrix().clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(c);
    }
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if min < -PSD_TOL * (1.0 + scale) {
        return Err(Error::NegativeEigenvalue(min));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    debug_assert_eq!(m.nrows(), d);
    Ok(SymMat::symmetrized(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    FixedPoint,
    Direct,
}

impl std::str::FromStr for SolveMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-point" => Ok(SolveMethod::FixedPoint),
            "direct" => Ok(SolveMethod::Direct),
            other => Err(Error::schema("method", format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StationarySolution {
    #[serde(rename = "C_infty")]
    pub c_infty: SymMat,
    pub method: SolveMethod,
    pub iterations: Option<usize>,
    pub estimated_relative_error: Option<f64>,
    pub pivot_ratio: Option<f64>,
    /// `||T(C) - gamma S(C) - gamma Sigma||_F`.
    pub residual: f64,
    pub exact_backing: bool,
}

fn check_gamma(gamma: f64, r2: f64) -> Result<()> {
    if gamma > 0.0 && gamma * r2 < 1.0 {
        Ok(())
    } else {
        Err(Error::StepSizeTooLarge {
            gamma,
            limit: 1.0 / r2,
        })
    }
}

/// One exact recursion step; see [`CovarianceProblem::step`].
pub fn covariance_step(
    c: &SymMat,
    h: &SpdMat,
    s_op: &QuadraticOperatorS,
    sigma: &SymMat,
    gamma: f64,
) -> Result<SymMat> {
    CovarianceProblem::new(h.clone(), s_op.clone(), sigma.clone(), gamma)?.step(c)
}

pub fn solve_stationary_fixed_point(
    h: &SpdMat,
    s_op: &QuadraticOperatorS,
    sigma: &SymMat,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StationarySolution> {
    CovarianceProblem::new(h.clone(), s_op.clone(), sigma.clone(), gamma)?
        .solve_fixed_point(tol, max_iter)
}

pub fn solve_stationary_direct(
    h: &SpdMat,
    s_op: &QuadraticOperatorS,
    sigma: &SymMat,
    gamma: f64,
) -> Result<StationarySolution> {
    CovarianceProblem::new(h.clone(), s_op.clone(), sigma.clone(), gamma)?.solve_direct()
}

/// `gamma ||Sigma||_H / (1 - gamma R^2)`: `C_infty` is dominated by this
/// multiple of the identity.
pub fn crude_bound(sigma: &SymMat, h: &SpdMat, gamma: f64, r2: f64) -> Result<f64> {
    check_gamma(gamma, r2)?;
    Ok(gamma * matrix_norm_under(sigma, h)? / (1.0 - gamma * r2))
}

/// `(gamma/2) Tr(H^{-1} Sigma) + (1/2) gamma^2 R^2 d ||Sigma||_H / (1 - gamma R^2)`,
/// an upper bound on `Tr(C_infty)`.
pub fn refined_trace_bound(
    sigma: &SymMat,
    h: &SpdMat,
    gamma: f64,
    r2: f64,
    d: usize,
) -> Result<f64> {
    check_gamma(gamma, r2)?;
    let tr = (h.inverse() * sigma.as_matrix()).trace();
    let sigma_h = matrix_norm_under(sigma, h)?;
    Ok(0.5 * gamma * tr + 0.5 * gamma * gamma * r2 * d as f64 * sigma_h / (1.0 - gamma * r2))
}

/// JSON view of a solved instance, as printed by the `solve-cov` command.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    #[serde(flatten)]
    pub solution: StationarySolution,
    pub gamma: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    pub trace: f64,
    pub max_eigenvalue: f64,
    pub crude_bound: f64,
    pub refined_trace_bound: f64,
    pub backing: SBackingKind,
    #[serde(serialize_with = "serialize_vector")]
    pub eigenvalues: Vector,
}

impl SolveReport {
    pub fn new(problem: &CovarianceProblem, solution: StationarySolution) -> Result<Self> {
        let ev = solution.c_infty.eigenvalues();
        Ok(SolveReport {
            gamma: problem.gamma,
            r2: problem.r2,
            trace: solution.c_infty.trace(),
            max_eigenvalue: ev.last().copied().unwrap_or(0.0),
            crude_bound: problem.crude_bound()?,
            refined_trace_bound: problem.refined_trace_bound()?,
            backing: problem.s_op.kind(),
            eigenvalues: Vector::from_vec(ev),
            solution,
        })
    }
}
