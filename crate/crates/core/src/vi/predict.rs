//! Posterior predictive trajectories from decoupled field samples.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::bound::{field_nodes, register, ElboDraws};
use super::ModelState;
use crate::error::{check_dim, Error, Result};
use crate::field::{DecoupledSample, SampledField};
use crate::grad::Tape;
use crate::linalg::Tensor;
use crate::odeint::{integrate_from, SolverSpec};
use crate::systems::Trajectory;

/// Number of posterior paths drawn for prediction.
pub const DEFAULT_PATHS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    Fixed(Vec<f64>),
    /// Diagonal Gaussian, sampled once per path.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

impl InitialCondition {
    fn dim(&self) -> usize {
        match self {
            InitialCondition::Fixed(x) => x.len(),
            InitialCondition::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitialCondition::Fixed(x) => x.clone(),
            InitialCondition::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + s * e
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    /// One `n x 2D` tensor per successful path.
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    /// Sample variance across paths (population form).
    pub var: Tensor,
    /// Paths whose integration failed.
    pub failures: usize,
}

impl Prediction {
    pub fn mean_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.times.clone(), self.mean.clone())
    }
}

/// The field sample defined by frozen draws, evaluated at the current
/// parameters.
pub fn sample_field(state: &ModelState, draws: &ElboDraws) -> Result<SampledField> {
    let mut tape = Tape::new();
    let leaves = register(&mut tape, state);
    let (vars, _) = field_nodes(&mut tape, state, &leaves, draws)?;
    let [w, alpha, nu, z, ls, sv] = vars.params;
    let sample = DecoupledSample::new(
        tape.value(w).clone(),
        tape.value(alpha).clone(),
        draws.phases.clone(),
        tape.value(nu).clone(),
        tape.value(z).clone(),
        tape.value(ls).data().to_vec(),
        tape.value(sv).item(),
    )?;
    SampledField::new(sample, state.kind)
}

/// Draw `n_paths` field samples and initial states and integrate each from
/// `t0` to `times`. Randomness is consumed sequentially, so results depend
/// only on `rng`.
pub fn predict<R: Rng + ?Sized>(
    state: &ModelState,
    initial: &InitialCondition,
    t0: f64,
    times: &[f64],
    n_paths: usize,
    solver: &SolverSpec,
    rng: &mut R,
) -> Result<Prediction> {
    check_dim("initial condition", state.dim(), initial.dim())?;
    if n_paths == 0 || times.is_empty() {
        return Err(Error::invalid("prediction needs paths and output times"));
    }
    let jobs: Vec<(SampledField, Vec<f64>)> = (0..n_paths)
        .map(|_| {
            let draws = ElboDraws::sample(state, rng);
            let x0 = initial.draw(rng);
            sample_field(state, &draws).map(|f| (f, x0))
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<Vec<Vec<f64>>>> = jobs
        .par_iter()
        .map(|(f, x0)| integrate_from(f, x0, t0, times, solver))
        .collect();

    let mut samples = Vec::with_capacity(n_paths);
    let mut failures = 0;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(rows) if rows.iter().flatten().all(|v| v.is_finite()) => {
                samples.push(Tensor::from_rows(&rows))
            }
            Ok(_) => failures += 1,
            Err(e) => {
                failures += 1;
                last_err = Some(e);
            }
        }
    }
    if samples.is_empty() {
        return Err(last_err.unwrap_or(Error::NonFinite { op: "predict" }));
    }
    let (mean, var) = moments(&samples);
    Ok(Prediction {
        times: times.to_vec(),
        samples,
        mean,
        var,
        failures,
    })
}

fn moments(samples: &[Tensor]) -> (Tensor, Tensor) {
    let k = samples.len() as f64;
    let (r, c) = samples[0].shape();
    let mut mean = Tensor::zeros(r, c);
    for s in samples {
        mean.add_assign(s);
    }
    let mean = mean.scale(1.0 / k);
    let mut var = Tensor::zeros(r, c);
    for s in samples {
        var.add_assign(&s.zip_map(&mean, |a, b| (a - b) * (a - b)));
    }
    (mean, var.scale(1.0 / k))
}

/// Mean negative log-likelihood of `truth` under independent Gaussians with
/// the predictive mean and variance plus `obs_var`, averaged over every
/// coordinate.
pub fn gaussian_mnll(pred: &Prediction, truth: &Trajectory, obs_var: f64) -> Result<f64> {
    check_dim("mnll rows", pred.mean.rows(), truth.len())?;
    check_dim("mnll columns", pred.mean.cols(), truth.dim())?;
    let total: f64 = pred
        .mean
        .data()
        .iter()
        .zip(pred.var.data())
        .zip(truth.states.data())
        .map(|((m, v), y)| {
            let s = v + obs_var;
            0.5 * (2.0 * PI * s).ln() + (y - m).powi(2) / (2.0 * s)
        })
        .sum();
    Ok(total / pred.mean.len() as f64)
}
