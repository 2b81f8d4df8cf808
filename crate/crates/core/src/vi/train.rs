//! Stochastic optimisation of the bounds with Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bound::{elbo_with_gradient, BoundOptions, ElboDraws, ElboTerms};
use super::predict::{gaussian_mnll, predict, InitialCondition};
use super::{Bound, ModelState};
use crate::error::{Error, Result};
use crate::grad::Adam;
use crate::linalg::Tensor;
use crate::odeint::SolverSpec;
use crate::systems::Trajectory;

/// Default sub-sequence length for batched training.
pub const BATCH_WINDOW: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub bound: Bound,
    /// RK4 step is the smallest observation spacing divided by this.
    pub step_divisor: f64,
    /// Exponential smoothing factor of the reported trace.
    pub smoothing: f64,
}

impl TrainConfig {
    pub fn new(bound: Bound) -> Self {
        TrainConfig {
            iterations: 2500,
            lr: 3e-3,
            bound,
            step_divisor: 10.0,
            smoothing: 0.95,
        }
    }

    fn options(&self) -> BoundOptions {
        BoundOptions {
            step_divisor: self.step_divisor,
            ..BoundOptions::new(self.bound)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub window: usize,
    pub batch_size: usize,
    /// Epochs between full-trajectory evaluations.
    pub eval_every: usize,
    pub eval_paths: usize,
    pub eval_solver: SolverSpec,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            window: BATCH_WINDOW,
            batch_size: 16,
            eval_every: 10,
            eval_paths: super::DEFAULT_PATHS,
            eval_solver: SolverSpec::default(),
        }
    }
}

/// Full-trajectory MNLL recorded during batched training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub epoch: usize,
    pub mnll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Bound estimate at every iteration.
    pub elbo: Vec<f64>,
    /// Exponentially smoothed `elbo`.
    pub smoothed: Vec<f64>,
    pub seconds: f64,
    pub snapshots: Vec<Snapshot>,
    /// Index into `snapshots` of the parameters that were kept.
    pub best: Option<usize>,
}

impl TrainReport {
    fn push(&mut self, value: f64, smoothing: f64) {
        let s = match self.smoothed.last() {
            Some(prev) => smoothing * prev + (1.0 - smoothing) * value,
            None => value,
        };
        self.elbo.push(value);
        self.smoothed.push(s);
    }
}

fn diverged(iteration: usize, err: Error, trace: &[f64]) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Integration { .. } | Error::NotPositiveDefinite { .. } => {
            Error::Diverged {
                iteration,
                reason: err.to_string(),
                trace: trace.to_vec(),
            }
        }
        other => other,
    }
}

fn step<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[Trajectory],
    opts: &BoundOptions,
    adam: &mut Adam,
    iteration: usize,
    report: &TrainReport,
    rng: &mut R,
) -> Result<ElboTerms> {
    let draws = ElboDraws::sample(state, rng);
    let (terms, grads) = elbo_with_gradient(state, data, &draws, opts)
        .map_err(|e| diverged(iteration, e, &report.elbo))?;
    if !terms.total.is_finite() {
        return Err(diverged(
            iteration,
            Error::NonFinite { op: "elbo" },
            &report.elbo,
        ));
    }
    let neg: Vec<Tensor> = grads.iter().map(|g| g.scale(-1.0)).collect();
    adam.update(&mut state.tensors_mut(), &neg);
    Ok(terms)
}

/// Maximise the bound with one fresh Monte-Carlo draw per iteration.
pub fn train<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[Trajectory],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let start = Instant::now();
    let opts = cfg.options();
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    for it in 0..cfg.iterations {
        let terms = step(state, data, &opts, &mut adam, it, &report, rng)?;
        report.push(terms.total, cfg.smoothing);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Sub-sequences of length `window` with stride one; `N - window` per
/// trajectory, or the whole trajectory when it is not longer than `window`.
pub fn windows(data: &[Trajectory], window: usize) -> Result<Vec<Trajectory>> {
    if window < 2 {
        return Err(Error::invalid("window length must be at least 2"));
    }
    let mut out = Vec::new();
    for t in data {
        let n = t.len();
        if window >= n {
            out.push(t.clone());
            continue;
        }
        let dim = t.dim();
        for s in 0..n - window {
            out.push(Trajectory::new(
                t.times[s..s + window].to_vec(),
                Tensor::from_vec(
                    window,
                    dim,
                    t.states.data()[s * dim..(s + window) * dim].to_vec(),
                ),
            )?);
        }
    }
    Ok(out)
}

/// Full-trajectory MNLL when rolling out from each trajectory's first
/// observation.
fn full_mnll<R: Rng + ?Sized>(
    state: &ModelState,
    data: &[Trajectory],
    batch: &BatchConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for t in data {
        let x0 = InitialCondition::Fixed(t.states.row(0).to_vec());
        let pred = predict(
            state,
            &x0,
            t.times[0],
            &t.times,
            batch.eval_paths,
            &batch.eval_solver,
            rng,
        )?;
        total += gaussian_mnll(&pred, t, state.obs_var())?;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch training over sliding windows whose first observations are
/// taken as known initial states. State posteriors in `state` are dropped.
/// Every `eval_every` epochs the full-trajectory MNLL is recorded, and the
/// parameters with the lowest value are kept.
pub fn train_batched<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &[Trajectory],
    cfg: &TrainConfig,
    batch: &BatchConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if batch.batch_size == 0 || batch.eval_every == 0 {
        return Err(Error::invalid(
            "batch size and evaluation interval must be positive",
        ));
    }
    let start = Instant::now();
    let subs = windows(data, batch.window)?;
    state.states.clear();
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelState)> = None;
    let mut order: Vec<usize> = (0..subs.len()).collect();
    let mut it = 0;
    let mut epoch = 0;
    while it < cfg.iterations {
        order.shuffle(rng);
        for chunk in order.chunks(batch.batch_size) {
            if it == cfg.iterations {
                break;
            }
            let part: Vec<Trajectory> = chunk.iter().map(|&i| subs[i].clone()).collect();
            let opts = BoundOptions {
                bound: Bound::Standard,
                step_divisor: cfg.step_divisor,
                likelihood_scale: subs.len() as f64 / part.len() as f64,
                fixed_initial: Some(part.iter().map(|t| t.states.row(0).to_vec()).collect()),
            };
            let terms = step(state, &part, &opts, &mut adam, it, &report, rng)?;
            report.push(terms.total, cfg.smoothing);
            it += 1;
        }
        epoch += 1;
        if epoch % batch.eval_every == 0 || it == cfg.iterations {
            let mnll = full_mnll(state, data, batch, rng).unwrap_or(f64::INFINITY);
            report.snapshots.push(Snapshot {
                iteration: it,
                epoch,
                mnll,
            });
            if best.as_ref().is_none_or(|(b, _)| mnll < *b) {
                report.best = Some(report.snapshots.len() - 1);
                best = Some((mnll, state.clone()));
            }
        }
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
