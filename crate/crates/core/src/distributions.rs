//! Generative models for `(x, y)` pairs and their population moments.
//!
//! Randomness comes from ChaCha8 seeded through `SeedableRng::seed_from_u64`;
//! standard normals use `rand_distr::StandardNormal` (ziggurat). Both are
//! portable across platforms, so a `(spec, seed)` pair pins the sample stream.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{matrix_norm_under, serialize_vector, SpdMat, SymMat, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    /// `x ~ N(0, H)`, `y = w*.x + eta`, `eta ~ N(0, sigma^2)` independent of `x`.
    GaussianWellSpecified,
    /// `x ~ N(0, H)`, `y = w*.x + g(x) eta`.
    GaussianMisspecified,
    /// Finitely many `x` values, each with its own label distribution.
    DiscreteSupport,
}

/// Noise multiplier `g(x)` for the misspecified Gaussian family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecFn {
    /// `g(x) = ||x||`. Moments follow from the Gaussian fourth-moment identity.
    #[default]
    Norm,
    /// `g(x) = 1 + tanh(||x||)`. No closed form; only estimated moments.
    SaturatingNorm,
}

impl MisspecFn {
    fn eval(self, x: &[f64]) -> f64 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self {
            MisspecFn::Norm => norm,
            MisspecFn::SaturatingNorm => 1.0 + norm.tanh(),
        }
    }
}

/// One atom of a discrete distribution: `x` with probability `prob`, and
/// label `y ~ N(y_mean, y_sd^2)` (a point mass when `y_sd = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub prob: f64,
    #[serde(default)]
    pub y_mean: f64,
    #[serde(default)]
    pub y_sd: f64,
}

/// Serializable description of a distribution. Field names are the config
/// file keys of the `[distribution]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    pub kind: DistributionKind,
    #[serde(default)]
    pub d: Option<usize>,
    /// Covariance of `x` for the Gaussian kinds; identity when omitted.
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_star: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub misspec_fn: MisspecFn,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support: Vec<SupportPoint>,
}

#[derive(Clone, Debug)]
struct Atom {
    x: Vector,
    prob: f64,
    y_mean: f64,
    y_sd: f64,
}

#[derive(Clone, Debug)]
enum Model {
    Gaussian {
        h: SpdMat,
        /// Sampling factor `H^{1/2}`, row-major.
        factor: Vec<f64>,
        misspec: Option<MisspecFn>,
    },
    Discrete {
        atoms: Vec<Atom>,
        index: WeightedIndex<f64>,
    },
}

/// A validated generative model.
#[derive(Clone, Debug)]
pub struct DistributionSpec {
    kind: DistributionKind,
    d: usize,
    w_star: Vector,
    noise_sigma: f64,
    model: Model,
}

impl DistributionSpec {
    pub fn gaussian_well_specified(h: SpdMat, w_star: Vector, noise_sigma: f64) -> Result<Self> {
        Self::gaussian(h, w_star, noise_sigma, None)
    }

    pub fn gaussian_misspecified(
        h: SpdMat,
        w_star: Vector,
        noise_sigma: f64,
        g: MisspecFn,
    ) -> Result<Self> {
        Self::gaussian(h, w_star, noise_sigma, Some(g))
    }

    fn gaussian(
        h: SpdMat,
        w_star: Vector,
        noise_sigma: f64,
        misspec: Option<MisspecFn>,
    ) -> Result<Self> {
        let d = h.dim();
        if w_star.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w_star.len(),
            });
        }
        check_finite_vec(&w_star, "w_star")?;
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise_sigma must be finite and nonnegative, got {noise_sigma}"
            )));
        }
        let sq = h.sqrt();
        let factor = (0..d * d).map(|k| sq[(k / d, k % d)]).collect();
        let kind = if misspec.is_some() {
            DistributionKind::GaussianMisspecified
        } else {
            DistributionKind::GaussianWellSpecified
        };
        Ok(DistributionSpec {
            kind,
            d,
            w_star,
            noise_sigma,
            model: Model::Gaussian { h, factor, misspec },
        })
    }

    /// Builds a discrete distribution. `w*` is solved from the normal
    /// equations of the population.
    pub fn discrete(support: &[SupportPoint]) -> Result<Self> {
        let first = support
            .first()
            .ok_or_else(|| Error::InvalidSpec("discrete support is empty".into()))?;
        let d = first.x.len();
        if d == 0 {
            return Err(Error::InvalidSpec(
                "support points must have dimension >= 1".into(),
            ));
        }
        let mut atoms = Vec::with_capacity(support.len());
        let mut total = 0.0;
        for p in support {
            if p.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.x.len(),
                });
            }
            if !(p.prob >= 0.0 && p.prob.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "invalid probability {}",
                    p.prob
                )));
            }
            if !(p.y_sd >= 0.0 && p.y_sd.is_finite() && p.y_mean.is_finite()) {
                return Err(Error::InvalidSpec("invalid label distribution".into()));
            }
            let x = Vector::from_column_slice(&p.x);
            check_finite_vec(&x, "support x")?;
            total += p.prob;
            atoms.push(Atom {
                x,
                prob: p.prob,
                y_mean: p.y_mean,
                y_sd: p.y_sd,
            });
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "support probabilities sum to {total}, expected 1"
            )));
        }
        let h = discrete_second_moment(&atoms, d);
        let h = SpdMat::new(h)
            .map_err(|_| Error::InvalidSpec("support does not span R^d (H is singular)".into()))?;
        let cross = atoms
            .iter()
            .fold(Vector::zeros(d), |acc, a| acc + &a.x * (a.prob * a.y_mean));
        let w_star = h.inverse() * cross;
        let index = WeightedIndex::new(atoms.iter().map(|a| a.prob))
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(DistributionSpec {
            kind: DistributionKind::DiscreteSupport,
            d,
            w_star,
            noise_sigma: 0.0,
            model: Model::Discrete { atoms, index },
        })
    }

    pub fn from_config(cfg: &DistributionConfig) -> Result<Self> {
        match cfg.kind {
            DistributionKind::DiscreteSupport => {
                let spec = Self::discrete(&cfg.support)?;
                if let Some(d) = cfg.d {
                    if d != spec.d {
                        return Err(Error::schema(
                            "distribution.d",
                            format!("support points have dimension {}, d = {d}", spec.d),
                        ));
                    }
                }
                Ok(spec)
            }
            kind => {
                let d = match (&cfg.h, &cfg.w_star, cfg.d) {
                    (_, _, Some(d)) => d,
                    (Some(h), _, None) => h.len(),
                    (None, Some(w), None) => w.len(),
                    (None, None, None) => {
                        return Err(Error::schema("distribution.d", "dimension is required"))
                    }
                };
                if d == 0 {
                    return Err(Error::schema("distribution.d", "must be at least 1"));
                }
                let h = match &cfg.h {
                    Some(rows) => {
                        let m = SymMat::from_rows(rows)
                            .map_err(|e| Error::schema("distribution.H", e.to_string()))?;
                        if m.dim() != d {
                            return Err(Error::schema(
                                "distribution.H",
                                format!("expected {d}x{d} matrix"),
                            ));
                        }
                        SpdMat::new(m)
                            .map_err(|e| Error::schema("distribution.H", e.to_string()))?
                    }
                    None => SpdMat::identity(d),
                };
                let w_star = match &cfg.w_star {
                    Some(w) if w.len() == d => Vector::from_column_slice(w),
                    Some(w) => {
                        return Err(Error::schema(
                            "distribution.w_star",
                            format!("expected length {d}, got {}", w.len()),
                        ))
                    }
                    None => Vector::zeros(d),
                };
                if kind == DistributionKind::GaussianWellSpecified {
                    Self::gaussian_well_specified(h, w_star, cfg.noise_sigma)
                } else {
                    Self::gaussian_misspecified(h, w_star, cfg.noise_sigma, cfg.misspec_fn)
                }
            }
        }
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Population minimizer `w*`.
    pub fn w_star(&self) -> &Vector {
        &self.w_star
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Second moment `E[x x^T]`, exact for every kind.
    pub fn second_moment(&self) -> SpdMat {
        match &self.model {
            Model::Gaussian { h, .. } => h.clone(),
            Model::Discrete { atoms, .. } => SpdMat::new(discrete_second_moment(atoms, self.d))
                .expect("validated at construction"),
        }
    }

    /// `E[||x||^2 x x^T]`, exact for every kind (it depends on `x` only).
    pub fn fourth_moment(&self) -> SymMat {
        match &self.model {
            Model::Gaussian { h, .. } => gaussian_fourth_moment(h),
            Model::Discrete { atoms, .. } => {
                let mut acc = DMatrix::zeros(self.d, self.d);
                for a in atoms {
                    acc += &a.x * a.x.transpose() * (a.prob * a.x.norm_squared());
                }
                SymMat::symmetrized(acc)
            }
        }
    }

    /// Exact fourth-moment constant `R^2`.
    pub fn r2(&self) -> f64 {
        matrix_norm_under(&self.fourth_moment(), &self.second_moment()).expect("dimensions agree")
    }

    /// Largest admissible stepsize (exclusive), `1 / R^2`.
    pub fn stability_limit(&self) -> f64 {
        1.0 / self.r2()
    }

    pub fn stream(&self, seed: u64) -> SampleStream<'_> {
        SampleStream::new(self, seed)
    }

    pub(crate) fn atoms_for_operator(&self) -> Option<Vec<(Vector, f64)>> {
        match &self.model {
            Model::Discrete { atoms, .. } => {
                Some(atoms.iter().map(|a| (a.x.clone(), a.prob)).collect())
            }
            Model::Gaussian { .. } => None,
        }
    }
}

fn check_finite_vec(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn discrete_second_moment(atoms: &[Atom], d: usize) -> SymMat {
    let mut acc = DMatrix::zeros(d, d);
    for a in atoms {
        acc += &a.x * a.x.transpose() * a.prob;
    }
    SymMat::symmetrized(acc)
}

/// Isserlis: for `x ~ N(0, H)`, `E[||x||^2 x x^T] = Tr(H) H + 2 H^2`.
pub fn gaussian_fourth_moment(h: &SpdMat) -> SymMat {
    let hm = h.as_matrix();
    SymMat::symmetrized(hm * hm.trace() + hm * hm * 2.0)
}

/// Seeded i.i.d. sample source.
pub struct SampleStream<'a> {
    spec: &'a DistributionSpec,
    rng: ChaCha8Rng,
    counter: u64,
    z: Vec<f64>,
}

impl<'a> SampleStream<'a> {
    pub fn new(spec: &'a DistributionSpec, seed: u64) -> Self {
        SampleStream {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counter: 0,
            z: vec![0.0; spec.d],
        }
    }

    /// Number of samples drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Writes the next `x` into `x` and returns its label.
    pub fn next_into(&mut self, x: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.spec.d);
        self.counter += 1;
        let d = self.spec.d;
        let w = self.spec.w_star.as_slice();
        match &self.spec.model {
            Model::Gaussian {
                factor, misspec, ..
            } => {
                for zi in self.z.iter_mut() {
                    *zi = self.rng.sample(StandardNormal);
                }
                for i in 0..d {
                    let row = &factor[i * d..(i + 1) * d];
                    x[i] = row.iter().zip(&self.z).map(|(a, b)| a * b).sum();
                }
                let eta: f64 = self.rng.sample::<f64, _>(StandardNormal) * self.spec.noise_sigma;
                let mean = dot(w, x);
                match misspec {
                    None => mean + eta,
                    Some(g) => mean + g.eval(x) * eta,
                }
            }
            Model::Discrete { atoms, index } => {
                let a = &atoms[index.sample(&mut self.rng)];
                x.copy_from_slice(a.x.as_slice());
                if a.y_sd > 0.0 {
                    a.y_mean + a.y_sd * self.rng.sample::<f64, _>(StandardNormal)
                } else {
                    a.y_mean
                }
            }
        }
    }

    pub fn sample(&mut self) -> (Vector, f64) {
        let mut x = Vector::zeros(self.spec.d);
        let y = self.next_into(x.as_mut_slice());
        (x, y)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Whether moments come from closed forms or from a finite sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exactness {
    Exact,
    Estimated { n_samples: usize },
}

/// The population quantities every bound depends on.
#[derive(Clone, Debug, Serialize)]
pub struct Moments {
    #[serde(rename = "H")]
    h: SpdMat,
    #[serde(rename = "Sigma")]
    sigma: SymMat,
    #[serde(serialize_with = "serialize_vector")]
    w_star: Vector,
    mu: f64,
    #[serde(rename = "R2")]
    r2: f64,
    d: usize,
    #[serde(skip)]
    fourth: SymMat,
    exactness: Exactness,
}

/// Relative tolerance for accepting `Sigma` as PSD.
const SIGMA_PSD_TOL: f64 = 1e-10;

/// Safety factor applied to an estimated `R^2` in the stepsize gate.
pub const ESTIMATED_R2_MARGIN: f64 = 1.05;

impl Moments {
    /// Assembles a moment bundle; `mu` and `R^2` are derived.
    pub fn new(
        h: SpdMat,
        sigma: SymMat,
        w_star: Vector,
        fourth: SymMat,
        exactness: Exactness,
    ) -> Result<Self> {
        let d = h.dim();
        for got in [sigma.dim(), w_star.len(), fourth.dim()] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got });
            }
        }
        if !sigma.is_psd(SIGMA_PSD_TOL) {
            return Err(Error::NotPositiveSemidefinite(sigma.min_eigenvalue()));
        }
        let r2 = matrix_norm_under(&fourth, &h)?;
        Ok(Moments {
            mu: h.min_eigenvalue(),
            h,
            sigma,
            w_star,
            r2,
            d,
            fourth,
            exactness,
        })
    }

    pub fn h(&self) -> &SpdMat {
        &self.h
    }

    pub fn sigma(&self) -> &SymMat {
        &self.sigma
    }

    pub fn w_star(&self) -> &Vector {
        &self.w_star
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `E[||x||^2 x x^T]`.
    pub fn fourth_moment(&self) -> &SymMat {
        &self.fourth
    }

    pub fn exactness(&self) -> Exactness {
        self.exactness
    }

    pub fn is_exact(&self) -> bool {
        self.exactness == Exactness::Exact
    }

    /// Stepsizes must lie strictly below this value. Estimated moments get a
    /// 5% safety margin on `R^2`.
    pub fn stability_limit(&self) -> f64 {
        match self.exactness {
            Exactness::Exact => 1.0 / self.r2,
            Exactness::Estimated { .. } => 1.0 / (ESTIMATED_R2_MARGIN * self.r2),
        }
    }

    pub fn check_stepsize(&self, gamma: f64) -> Result<()> {
        let limit = self.stability_limit();
        if gamma > 0.0 && gamma < limit {
            Ok(())
        } else {
            Err(Error::StepSizeTooLarge { gamma, limit })
        }
    }
}

/// Closed-form moments for the tractable families.
pub fn exact_moments(spec: &DistributionSpec) -> Result<Moments> {
    let d = spec.d;
    let h = spec.second_moment();
    let fourth = spec.fourth_moment();
    let sigma = match &spec.model {
        Model::Gaussian { misspec, .. } => {
            let s2 = spec.noise_sigma * spec.noise_sigma;
            match misspec {
                None => h.as_sym() * s2,
                // g(x) = ||x||: Sigma = sigma^2 E[||x||^2 x x^T].
                Some(MisspecFn::Norm) => &fourth * s2,
                Some(g) => {
                    return Err(Error::IntractableMoments(format!(
                        "misspecified Gaussian with {g:?} noise multiplier"
                    )))
                }
            }
        }
        Model::Discrete { atoms, .. } => {
            let mut acc = DMatrix::zeros(d, d);
            for a in atoms {
                let bias = a.y_mean - a.x.dot(&spec.w_star);
                let second = a.y_sd * a.y_sd + bias * bias;
                acc += &a.x * a.x.transpose() * (a.prob * second);
            }
            SymMat::symmetrized(acc)
        }
    };
    Moments::new(h, sigma, spec.w_star.clone(), fourth, Exactness::Exact)
}

/// Plug-in moments from `n` fresh samples. Gaussian kinds use their known
/// `w*`; discrete distributions fit `w*` by least squares on the sample.
pub fn estimate_moments(spec: &DistributionSpec, n: usize, seed: u64) -> Result<Moments> {
    let d = spec.d;
    if n < d {
        return Err(Error::InvalidSpec(format!(
            "need at least d = {d} samples, got {n}"
        )));
    }
    let mut stream = spec.stream(seed);
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut x = vec![0.0; d];
    let mut h_acc = DMatrix::zeros(d, d);
    let mut cross = Vector::zeros(d);
    for _ in 0..n {
        let y = stream.next_into(&mut x);
        for i in 0..d {
            cross[i] += y * x[i];
            for j in 0..d {
                h_acc[(i, j)] += x[i] * x[j];
            }
        }
        xs.extend_from_slice(&x);
        ys.push(y);
    }
    let inv_n = 1.0 / n as f64;
    let h_hat =
        SpdMat::new(SymMat::symmetrized(h_acc * inv_n)).map_err(|_| Error::SingularEmpiricalH)?;
    let w_star = match spec.kind {
        DistributionKind::DiscreteSupport => h_hat.inverse() * (cross * inv_n),
        _ => spec.w_star.clone(),
    };
    let mut sigma_acc = DMatrix::zeros(d, d);
    let mut fourth_acc = DMatrix::zeros(d, d);
    for (xi, &y) in xs.chunks_exact(d).zip(&ys) {
        let r = y - dot(w_star.as_slice(), xi);
        let n2 = dot(xi, xi);
        for i in 0..d {
            for j in 0..d {
                let p = xi[i] * xi[j];
                sigma_acc[(i, j)] += r * r * p;
                fourth_acc[(i, j)] += n2 * p;
            }
        }
    }
    Moments::new(
        h_hat,
        SymMat::symmetrized(sigma_acc * inv_n),
        w_star,
        SymMat::symmetrized(fourth_acc * inv_n),
        Exactness::Estimated { n_samples: n },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::psd_order_leq;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn two_point() -> DistributionSpec {
        DistributionSpec::discrete(&[
            SupportPoint {
                x: e(2, 0),
                prob: 0.5,
                y_mean: 0.0,
                y_sd: 0.0,
            },
            SupportPoint {
                x: e(2, 1),
                prob: 0.5,
                y_mean: 0.0,
                y_sd: 0.0,
            },
        ])
        .unwrap()
    }

    fn aniso_h() -> SpdMat {
        SpdMat::new(
            SymMat::from_rows(&[
                vec![1.0, 0.3, 0.0],
                vec![0.3, 0.6, 0.1],
                vec![0.0, 0.1, 0.3],
            ])
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn point_mass_always_same_sample() {
        let spec = DistributionSpec::discrete(&[SupportPoint {
            x: vec![1.0],
            prob: 1.0,
            y_mean: 0.0,
            y_sd: 0.0,
        }])
        .unwrap();
        let mut s = spec.stream(7);
        for _ in 0..100 {
            let (x, y) = s.sample();
            assert_eq!(x.as_slice(), &[1.0]);
            assert_eq!(y, 0.0);
        }
        assert_eq!(s.counter(), 100);
    }

    #[test]
    fn noiseless_gaussian_labels_are_exact() {
        let w = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let spec = DistributionSpec::gaussian_well_specified(aniso_h(), w.clone(), 0.0).unwrap();
        let mut s = spec.stream(1);
        for _ in 0..1000 {
            let (x, y) = s.sample();
            assert_eq!(y, w.dot(&x));
        }
    }

    #[test]
    fn residual_mean_is_near_zero() {
        let w = Vector::from_vec(vec![0.5, 0.5]);
        let spec =
            DistributionSpec::gaussian_well_specified(SpdMat::identity(2), w.clone(), 1.0).unwrap();
        let mut s = spec.stream(11);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let (x, y) = s.sample();
                y - w.dot(&x)
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn streams_are_reproducible() {
        let spec = DistributionSpec::gaussian_misspecified(
            aniso_h(),
            Vector::from_vec(vec![1.0, 0.0, -1.0]),
            0.7,
            MisspecFn::Norm,
        )
        .unwrap();
        let a: Vec<_> = {
            let mut s = spec.stream(99);
            (0..500).map(|_| s.sample()).collect()
        };
        let b: Vec<_> = {
            let mut s = spec.stream(99);
            (0..500).map(|_| s.sample()).collect()
        };
        assert_eq!(a, b);
        let mut other = spec.stream(100);
        assert_ne!(a[0], other.sample());
    }

    #[test]
    fn standard_gaussian_moments() {
        for d in [1, 3, 6] {
            let spec = DistributionSpec::gaussian_well_specified(
                SpdMat::identity(d),
                Vector::zeros(d),
                2.0,
            )
            .unwrap();
            let m = exact_moments(&spec).unwrap();
            assert!((m.mu() - 1.0).abs() < 1e-12);
            assert!((m.r2() - (d as f64 + 2.0)).abs() < 1e-12);
            let diff = (m.sigma().as_matrix() - DMatrix::identity(d, d) * 4.0).amax();
            assert!(diff < 1e-12);
            assert!(m.is_exact());
        }
    }

    #[test]
    fn two_point_moments_by_enumeration() {
        let m = exact_moments(&two_point()).unwrap();
        assert!((m.h().as_matrix() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert!((m.mu() - 0.5).abs() < 1e-15);
        assert!((m.r2() - 1.0).abs() < 1e-12);
        assert_eq!(m.sigma().frobenius_norm(), 0.0);
    }

    #[test]
    fn discrete_w_star_solves_normal_equations() {
        let spec = DistributionSpec::discrete(&[
            SupportPoint {
                x: vec![1.0, 0.0],
                prob: 0.25,
                y_mean: 1.0,
                y_sd: 0.5,
            },
            SupportPoint {
                x: vec![1.0, 1.0],
                prob: 0.25,
                y_mean: 3.0,
                y_sd: 0.0,
            },
            SupportPoint {
                x: vec![0.0, 1.0],
                prob: 0.5,
                y_mean: -1.0,
                y_sd: 1.0,
            },
        ])
        .unwrap();
        // H = [[.5,.25],[.25,.75]], E[yx] = [1, .25]
        let w = spec.w_star();
        let h = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.75]);
        let r = &h * w - Vector::from_vec(vec![1.0, 0.25]);
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn r2_is_the_smallest_feasible_constant() {
        let specs = vec![
            DistributionSpec::gaussian_well_specified(aniso_h(), Vector::zeros(3), 1.0).unwrap(),
            two_point(),
            DistributionSpec::discrete(&[
                SupportPoint {
                    x: vec![2.0, 0.0],
                    prob: 0.3,
                    y_mean: 0.0,
                    y_sd: 1.0,
                },
                SupportPoint {
                    x: vec![1.0, 1.0],
                    prob: 0.7,
                    y_mean: 1.0,
                    y_sd: 0.0,
                },
            ])
            .unwrap(),
        ];
        for spec in specs {
            let m = exact_moments(&spec).unwrap();
            let h = m.h().as_sym();
            assert!(psd_order_leq(m.fourth_moment(), &(h * m.r2()), 1e-12).unwrap());
            assert!(!psd_order_leq(m.fourth_moment(), &(h * (0.99 * m.r2())), 1e-12).unwrap());
            assert!(h.trace() <= m.r2() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn misspecified_norm_family_has_closed_form() {
        let spec = DistributionSpec::gaussian_misspecified(
            aniso_h(),
            Vector::zeros(3),
            1.0,
            MisspecFn::Norm,
        )
        .unwrap();
        let m = exact_moments(&spec).unwrap();
        let diff = (m.sigma().as_matrix() - m.fourth_moment().as_matrix()).amax();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn saturating_family_is_intractable() {
        let spec = DistributionSpec::gaussian_misspecified(
            SpdMat::identity(2),
            Vector::zeros(2),
            1.0,
            MisspecFn::SaturatingNorm,
        )
        .unwrap();
        assert!(matches!(
            exact_moments(&spec),
            Err(Error::IntractableMoments(_))
        ));
        let est = estimate_moments(&spec, 20_000, 3).unwrap();
        assert_eq!(est.exactness(), Exactness::Estimated { n_samples: 20_000 });
        assert!(est.sigma().min_eigenvalue() > 0.0);
    }

    #[test]
    fn degenerate_support_is_rejected() {
        let err = DistributionSpec::discrete(&[SupportPoint {
            x: e(2, 0),
            prob: 1.0,
            y_mean: 0.0,
            y_sd: 0.0,
        }])
        .unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
        let err = DistributionSpec::discrete(&[
            SupportPoint {
                x: e(2, 0),
                prob: 0.5,
                y_mean: 0.0,
                y_sd: 0.0,
            },
            SupportPoint {
                x: e(2, 1),
                prob: 0.4,
                y_mean: 0.0,
                y_sd: 0.0,
            },
        ])
        .unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    #[test]
    fn rank_one_sample_gives_singular_estimate() {
        // A valid 2-d spec whose sample is rank one with overwhelming probability.
        let spec = DistributionSpec::discrete(&[
            SupportPoint {
                x: e(2, 0),
                prob: 1.0 - 1e-9,
                y_mean: 0.0,
                y_sd: 0.0,
            },
            SupportPoint {
                x: e(2, 1),
                prob: 1e-9,
                y_mean: 0.0,
                y_sd: 0.0,
            },
        ])
        .unwrap();
        assert!(matches!(
            estimate_moments(&spec, 1000, 0),
            Err(Error::SingularEmpiricalH)
        ));
    }

    #[test]
    fn estimates_concentrate() {
        let spec =
            DistributionSpec::gaussian_well_specified(SpdMat::identity(3), Vector::zeros(3), 1.0)
                .unwrap();
        let est = estimate_moments(&spec, 100_000, 5).unwrap();
        let diff = SymMat::symmetrized(est.h().as_matrix() - DMatrix::identity(3, 3));
        assert!(diff.spectral_norm() <= 0.05);

        let est = estimate_moments(&two_point(), 100_000, 5).unwrap();
        assert!((est.r2() - 1.0).abs() <= 0.02);
    }

    #[test]
    fn estimates_converge_with_sample_size() {
        let spec = DistributionSpec::gaussian_misspecified(
            aniso_h(),
            Vector::from_vec(vec![1.0, 1.0, 1.0]),
            0.5,
            MisspecFn::Norm,
        )
        .unwrap();
        let exact = exact_moments(&spec).unwrap();
        let errs: Vec<(f64, f64, f64)> = [1_000usize, 10_000, 100_000]
            .iter()
            .map(|&n| {
                // average over a few seeds to smooth single-draw noise
                let mut acc = (0.0, 0.0, 0.0);
                for seed in 0..8 {
                    let est = estimate_moments(&spec, n, 1000 + seed).unwrap();
                    acc.0 += (est.h().as_matrix() - exact.h().as_matrix()).norm();
                    acc.1 += (est.sigma().as_matrix() - exact.sigma().as_matrix()).norm();
                    acc.2 += (est.r2() - exact.r2()).abs();
                }
                acc
            })
            .collect();
        // monotone up to sampling noise, and clearly smaller over two decades
        for w in errs.windows(2) {
            assert!(w[1].0 < 1.1 * w[0].0, "{errs:?}");
            assert!(w[1].1 < 1.1 * w[0].1, "{errs:?}");
            assert!(w[1].2 < 1.1 * w[0].2, "{errs:?}");
        }
        let (first, last) = (errs[0], errs[2]);
        assert!(last.0 < first.0 / 3.0 && last.1 < first.1 / 3.0 && last.2 < first.2 / 3.0);
    }

    #[test]
    fn config_round_trip_builds_spec() {
        let cfg: DistributionConfig = toml::from_str(
            r#"
            kind = "gaussian_misspecified"
            d = 2
            H = [[2.0, 0.5], [0.5, 1.0]]
            w_star = [1.0, -1.0]
            noise_sigma = 0.3
            "#,
        )
        .unwrap();
        let spec = DistributionSpec::from_config(&cfg).unwrap();
        assert_eq!(spec.kind(), DistributionKind::GaussianMisspecified);
        assert_eq!(spec.dim(), 2);
        let bad: DistributionConfig = toml::from_str(
            r#"
            kind = "gaussian_well_specified"
            H = [[1.0, 2.0], [2.0, 1.0]]
            "#,
        )
        .unwrap();
        assert!(matches!(
            DistributionSpec::from_config(&bad),
            Err(Error::Schema { .. })
        ));
    }
}
