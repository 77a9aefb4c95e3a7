//! The constant-stepsize SGD process for least squares.
//!
//! Iterates are indexed from `w_0 = w0`; iterate `w_s` for `s >= 1` consumes
//! the `s`-th sample. A run with horizon `T` produces `w_0, ..., w_{T-1}` and
//! averages `w_t, ..., w_{T-1}`.

use std::io::Write;

use serde::Serialize;

use crate::distributions::{dot, DistributionSpec, Moments};
use crate::error::{Error, Result};
use crate::matcore::{serialize_vector, weighted_norm_sq, SymMat, Vector};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SgdConfig {
    pub gamma: f64,
    #[serde(serialize_with = "serialize_vector")]
    pub w0: Vector,
    /// First iterate included in the tail average (`t`).
    pub t_avg_start: usize,
    /// Horizon `T`; the last averaged iterate is `w_{T-1}`.
    pub horizon: usize,
    /// Keep every `record_every`-th iterate; 0 keeps none.
    pub record_every: usize,
    /// Also maintain averages over `[T/2, T)`, `[T/4, T)`, ...
    pub checkpoints: bool,
}

impl SgdConfig {
    pub fn new(gamma: f64, w0: Vector, t_avg_start: usize, horizon: usize) -> Self {
        SgdConfig {
            gamma,
            w0,
            t_avg_start,
            horizon,
            record_every: 0,
            checkpoints: false,
        }
    }

    pub fn with_record_every(mut self, stride: usize) -> Self {
        self.record_every = stride;
        self
    }

    pub fn with_checkpoints(mut self, on: bool) -> Self {
        self.checkpoints = on;
        self
    }

    pub fn window(&self) -> usize {
        self.horizon.saturating_sub(self.t_avg_start)
    }

    /// Checks the stepsize gate against the exact `R^2` of `spec`.
    pub fn validate(&self, spec: &DistributionSpec) -> Result<()> {
        self.validate_against(spec.stability_limit(), spec.dim())
    }

    /// Checks the stepsize gate against (possibly estimated) moments.
    pub fn validate_with_moments(&self, moments: &Moments) -> Result<()> {
        self.validate_against(moments.stability_limit(), moments.dim())
    }

    fn validate_against(&self, limit: f64, d: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < limit) {
            return Err(Error::StepSizeTooLarge {
                gamma: self.gamma,
                limit,
            });
        }
        if self.t_avg_start >= self.horizon {
            return Err(Error::EmptyAverageWindow {
                t: self.t_avg_start,
                horizon: self.horizon,
            });
        }
        if self.w0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.w0.len(),
            });
        }
        Ok(())
    }
}

/// Which of the three processes to simulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    /// Plain SGD on the sampled labels.
    Full,
    /// Labels replaced by `w*.x`, so the gradient noise at `w*` vanishes.
    Bias,
    /// Started at `w0 = w*`, driven only by gradient noise.
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointAverage {
    pub start: usize,
    #[serde(serialize_with = "serialize_vector")]
    pub average: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    /// `(step, w_step)` pairs at the recording stride.
    #[serde(skip)]
    pub recorded: Vec<(usize, Vector)>,
    #[serde(serialize_with = "serialize_vector")]
    pub tail_average: Vector,
    pub checkpoint_averages: Vec<CheckpointAverage>,
    /// `w_{T-1}`.
    #[serde(serialize_with = "serialize_vector")]
    pub final_iterate: Vector,
    pub samples_consumed: u64,
}

impl Trajectory {
    pub fn iterate_at(&self, step: usize) -> Option<&Vector> {
        self.recorded
            .binary_search_by_key(&step, |(s, _)| *s)
            .ok()
            .map(|i| &self.recorded[i].1)
    }

    /// Writes `step,excess_risk,dist_sq` rows for the recorded iterates.
    pub fn write_csv<W: Write>(&self, out: W, moments: &Moments) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["step", "excess_risk", "dist_sq"])?;
        for (step, w) in &self.recorded {
            let diff = w - moments.w_star();
            let risk = 0.5 * weighted_norm_sq(&diff, moments.h())?;
            wtr.write_record([
                step.to_string(),
                risk.to_string(),
                diff.norm_squared().to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Neumaier-compensated running sum of vectors.
#[derive(Clone, Debug)]
pub(crate) struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: u64,
}

impl CompensatedSum {
    pub(crate) fn new(d: usize) -> Self {
        CompensatedSum {
            sum: vec![0.0; d],
            comp: vec![0.0; d],
            count: 0,
        }
    }

    pub(crate) fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
        self.count += 1;
    }

    pub(crate) fn mean(&self) -> Vector {
        let n = self.count.max(1) as f64;
        Vector::from_iterator(
            self.sum.len(),
            self.sum.iter().zip(&self.comp).map(|(s, c)| (s + c) / n),
        )
    }
}

/// One SGD update `w + gamma (y - w.x) x`.
pub fn sgd_step(w: &Vector, x: &Vector, y: f64, gamma: f64) -> Vector {
    let mut out = w.clone();
    sgd_step_in_place(out.as_mut_slice(), x.as_slice(), y, gamma);
    out
}

#[inline]
pub fn sgd_step_in_place(w: &mut [f64], x: &[f64], y: f64, gamma: f64) {
    let scale = gamma * (y - dot(w, x));
    for (wi, xi) in w.iter_mut().zip(x) {
        *wi += scale * xi;
    }
}

/// Gradient of the pointwise loss at `w*`: `-(y - w*.x) x`.
pub fn gradient_noise(x: &Vector, y: f64, w_star: &Vector) -> Vector {
    x * (-(y - w_star.dot(x)))
}

fn checkpoint_starts(horizon: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = horizon / 2;
    while s >= 1 {
        if starts.last() != Some(&s) {
            starts.push(s);
        }
        s /= 2;
    }
    starts
}

/// Runs one process, calling `observe(step, w_step)` for every iterate.
pub fn run_process_with<F>(
    spec: &DistributionSpec,
    config: &SgdConfig,
    seed: u64,
    kind: ProcessKind,
    mut observe: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64]),
{
    config.validate(spec)?;
    let d = spec.dim();
    let w_star = spec.w_star().as_slice();
    let mut w: Vec<f64> = match kind {
        ProcessKind::Variance => w_star.to_vec(),
        _ => config.w0.as_slice().to_vec(),
    };
    let mut x = vec![0.0; d];
    let mut stream = spec.stream(seed);
    let mut tail = CompensatedSum::new(d);
    let starts = if config.checkpoints {
        checkpoint_starts(config.horizon)
    } else {
        Vec::new()
    };
    let mut checkpoint_sums: Vec<CompensatedSum> =
        starts.iter().map(|_| CompensatedSum::new(d)).collect();
    let mut recorded = Vec::new();

    for step in 0..config.horizon {
        if step > 0 {
            let mut y = stream.next_into(&mut x);
            if kind == ProcessKind::Bias {
                y = dot(w_star, &x);
            }
            sgd_step_in_place(&mut w, &x, y, config.gamma);
        }
        observe(step, &w);
        if config.record_every > 0 && step % config.record_every == 0 {
            recorded.push((step, Vector::from_column_slice(&w)));
        }
        if step >= config.t_avg_start {
            tail.add(&w);
        }
        for (s, acc) in starts.iter().zip(checkpoint_sums.iter_mut()) {
            if step >= *s {
                acc.add(&w);
            }
        }
    }

    Ok(Trajectory {
        recorded,
        tail_average: tail.mean(),
        checkpoint_averages: starts
            .iter()
            .zip(&checkpoint_sums)
            .map(|(&start, acc)| CheckpointAverage {
                start,
                average: acc.mean(),
            })
            .collect(),
        final_iterate: Vector::from_vec(w),
        samples_consumed: stream.counter(),
    })
}

pub fn run_process(
    spec: &DistributionSpec,
    config: &SgdConfig,
    seed: u64,
    kind: ProcessKind,
) -> Result<Trajectory> {
    run_process_with(spec, config, seed, kind, |_, _| {})
}

/// Plain tail-averaged SGD.
pub fn run_tail_averaged(
    spec: &DistributionSpec,
    config: &SgdConfig,
    seed: u64,
) -> Result<Trajectory> {
    run_process(spec, config, seed, ProcessKind::Full)
}

/// The noise-free process: same `x` stream, labels `y = w*.x`.
pub fn run_bias_process(
    spec: &DistributionSpec,
    config: &SgdConfig,
    seed: u64,
) -> Result<Trajectory> {
    run_process(spec, config, seed, ProcessKind::Bias)
}

/// The noise-driven process started at `w*`.
pub fn run_variance_process(
    spec: &DistributionSpec,
    config: &SgdConfig,
    seed: u64,
) -> Result<Trajectory> {
    run_process(spec, config, seed, ProcessKind::Variance)
}

/// Second moment of `w - w*` across replicate iterates taken at one step.
pub fn empirical_covariance(iterates: &[Vector], w_star: &Vector) -> Result<SymMat> {
    if iterates.len() < 2 {
        return Err(Error::TooFewReplicates {
            needed: 2,
            got: iterates.len(),
        });
    }
    let d = w_star.len();
    let mut acc = nalgebra::DMatrix::zeros(d, d);
    for w in iterates {
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w.len(),
            });
        }
        let e = w - w_star;
        acc += &e * e.transpose();
    }
    Ok(SymMat::symmetrized(acc / iterates.len() as f64))
}
