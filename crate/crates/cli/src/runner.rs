//! End-to-end experiment runs.

use std::time::Instant;

use anyhow::{Context, Result};
use hgp::systems::{generate, Dataset, Trajectory};
use hgp::vi::{
    initialize, predict, train, train_batched, BatchConfig, InitConfig, InitialCondition,
    ModelState, Prediction, TrainConfig, TrainReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::metrics::{
    cumulative_error, mean_metrics, trajectory_metrics, CumulativeRow, MetricsRecord,
    TrajectoryMetrics,
};

const TRAIN_STREAM: u64 = 1;
const PREDICT_STREAM: u64 = 2;

/// Independent random streams for training and prediction.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub state: ModelState,
    pub report: TrainReport,
}

/// Initialise and train on `data` as `cfg` prescribes.
pub fn fit(cfg: &RunConfig, data: &[Trajectory], rng: &mut ChaCha8Rng) -> Result<Fit> {
    let mut init = InitConfig::new(cfg.mode.kind(), cfg.inducing, cfg.mode.bound());
    init.basis_count = cfg.basis;
    init.obs_per_state = cfg.obs_per_state;
    let mut state = initialize(data, &init, rng).context("initialisation failed")?;
    let tc = TrainConfig {
        iterations: cfg.iterations,
        lr: cfg.lr,
        step_divisor: cfg.step_divisor,
        ..TrainConfig::new(cfg.mode.bound())
    };
    let report = if cfg.mode.batched() {
        let bc = BatchConfig {
            window: cfg.batch_window,
            batch_size: cfg.batch_size,
            eval_paths: cfg.paths,
            eval_solver: cfg.solver,
            ..BatchConfig::default()
        };
        train_batched(&mut state, data, &tc, &bc, rng)
    } else {
        train(&mut state, data, &tc, rng)
    }
    .context("training failed")?;
    Ok(Fit { state, report })
}

/// Mean state at `t_end` of rollouts from the last inferred shooting state
/// of trajectory `k`. Without state posteriors the first observation is used.
pub fn forecast_origin(
    cfg: &RunConfig,
    state: &ModelState,
    traj: &Trajectory,
    k: usize,
    t_end: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (initial, t0) = match state.states.get(k) {
        Some(post) => {
            let last = post.len() - 1;
            let means = post.means();
            let stds = post.stds();
            let start = post.plan.starts()[last];
            (
                InitialCondition::Gaussian {
                    mean: means.row(last).to_vec(),
                    std: stds.row(last).to_vec(),
                },
                traj.times[start],
            )
        }
        None => (
            InitialCondition::Fixed(traj.states.row(0).to_vec()),
            traj.times[0],
        ),
    };
    let pred = predict(state, &initial, t0, &[t_end], cfg.paths, &cfg.solver, rng)?;
    Ok(pred.mean.row(0).to_vec())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: MetricsRecord,
    pub state: ModelState,
    pub report: TrainReport,
    pub dataset: Dataset,
    /// Prediction for the first test trajectory.
    pub prediction: Option<Prediction>,
    pub cumulative: Vec<CumulativeRow>,
}

/// Metrics of a prediction, or infinite errors when every path failed.
fn score(
    pred: &hgp::Result<Prediction>,
    truth: &Trajectory,
    obs_var: f64,
    data: &Dataset,
) -> Result<TrajectoryMetrics> {
    match pred {
        Ok(p) => trajectory_metrics(p, truth, obs_var, data),
        Err(_) => Ok(TrajectoryMetrics {
            state_rmse: f64::INFINITY,
            state_mnll: f64::INFINITY,
            energy_rmse: f64::INFINITY,
            failed_paths: usize::MAX,
        }),
    }
}

/// Generate the data and train as `cfg` prescribes.
pub fn prepare(cfg: &RunConfig) -> Result<(Dataset, Fit)> {
    cfg.validate()?;
    let data = generate(&cfg.dataset_spec())?;
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let fit = fit(cfg, &data.train, &mut rng)?;
    Ok((data, fit))
}

/// Predict the test trajectories of `data` with a trained model and score
/// them. Task 1 forecasts `[T, 2T]` from the inferred state at `T`; task 2
/// rolls every fresh initial condition out over three training lengths.
pub fn evaluate(cfg: &RunConfig, data: Dataset, fit: Fit, started: Instant) -> Result<RunOutput> {
    let mut prng = stream(cfg.seed, PREDICT_STREAM);
    let obs_var = fit.state.obs_var();
    let mut origin = None;
    let mut per = Vec::with_capacity(data.test.len());
    let mut first = None;
    let mut cumulative = Vec::new();
    for (i, truth) in data.test.iter().enumerate() {
        let (x0, t0) = if cfg.task == 1 {
            let t_end = data.spec.train_length;
            let o = forecast_origin(cfg, &fit.state, &data.train[0], 0, t_end, &mut prng)?;
            origin = Some(o.clone());
            (o, t_end)
        } else {
            (truth.states.row(0).to_vec(), truth.times[0])
        };
        let pred = predict(
            &fit.state,
            &InitialCondition::Fixed(x0),
            t0,
            &truth.times,
            cfg.paths,
            &cfg.solver,
            &mut prng,
        );
        per.push(score(&pred, truth, obs_var, &data)?);
        if i == 0 {
            if let Ok(p) = &pred {
                cumulative = cumulative_error(p, truth, &data)?;
            }
            first = pred.ok();
        }
    }
    let (s, n, e) = mean_metrics(&per);
    let metrics = MetricsRecord {
        task: cfg.task,
        system: cfg.system.to_string(),
        mode: cfg.mode,
        seed: cfg.seed,
        state_rmse: s,
        state_mnll: n,
        energy_rmse: e,
        wall_time_s: started.elapsed().as_secs_f64(),
        train_time_s: fit.report.seconds,
        forecast_origin: origin,
        per_trajectory: per,
    };
    Ok(RunOutput {
        metrics,
        state: fit.state,
        report: fit.report,
        dataset: data,
        prediction: first,
        cumulative,
    })
}

/// Forecasting: train on `[0, T]`, predict `[T, 2T]` from the inferred state at `T`.
pub fn run_task1(cfg: &RunConfig) -> Result<RunOutput> {
    anyhow::ensure!(cfg.task == 1, "run_task1 needs task = 1");
    run(cfg)
}

/// Initial-condition extrapolation: train on `K` trajectories, predict fresh
/// initial conditions over three training lengths.
pub fn run_task2(cfg: &RunConfig) -> Result<RunOutput> {
    anyhow::ensure!(cfg.task == 2, "run_task2 needs task = 2");
    run(cfg)
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let (data, fit) = prepare(cfg)?;
    evaluate(cfg, data, fit, started)
}

#[derive(Clone, Debug)]
pub struct ToyOutput {
    pub prediction: Prediction,
    /// `|H(x_t) − H(x_0)|` in raw coordinates for every path and time.
    pub energy_errors: Vec<f64>,
    pub median_energy_error: f64,
}

/// Train on a short trajectory, then forecast from the inferred state at `T`
/// to `T + horizon` and measure the true-energy error of every sampled path.
pub fn run_toy(cfg: &RunConfig, horizon: f64) -> Result<ToyOutput> {
    anyhow::ensure!(cfg.task == 1, "the toy run is a forecasting task");
    let data = generate(&cfg.dataset_spec())?;
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let fit = fit(cfg, &data.train, &mut rng)?;
    let mut prng = stream(cfg.seed, PREDICT_STREAM);
    let t_end = data.spec.train_length;
    let origin = forecast_origin(cfg, &fit.state, &data.train[0], 0, t_end, &mut prng)?;
    let n = (horizon * data.spec.test_rate).round() as usize;
    let times: Vec<f64> = (0..=n)
        .map(|i| t_end + i as f64 / data.spec.test_rate)
        .collect();
    let pred = predict(
        &fit.state,
        &InitialCondition::Fixed(origin),
        t_end,
        &times,
        cfg.paths,
        &cfg.solver,
        &mut prng,
    )?;
    let h0 = data.energies(&data.train_clean[0])?[0];
    let mut errors = Vec::new();
    for s in &pred.samples {
        let t = Trajectory::new(times.clone(), s.clone())?;
        errors.extend(data.energies(&t)?.into_iter().map(|h| (h - h0).abs()));
    }
    let median = crate::aggregate::median(&errors);
    Ok(ToyOutput {
        prediction: pred,
        energy_errors: errors,
        median_energy_error: median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use hgp::systems::System;

    fn quick(task: u8, system: System, mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::new(task, system);
        cfg.mode = mode;
        cfg.inducing = 8;
        cfg.basis = 32;
        cfg.iterations = 20;
        cfg.paths = 4;
        cfg.trajectories = 2;
        cfg.train_length = Some(if task == 1 { 2.0 } else { 1.0 });
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn task1_runs_and_is_reproducible() {
        let cfg = quick(1, System::Fp, Mode::HgpEnergyShooting);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert!(a.metrics.is_finite());
        assert_eq!(a.metrics.state_rmse, b.metrics.state_rmse);
        assert_eq!(a.metrics.state_mnll, b.metrics.state_mnll);
        assert_eq!(a.metrics.energy_rmse, b.metrics.energy_rmse);
        assert_eq!(a.metrics.forecast_origin, b.metrics.forecast_origin);
        assert_eq!(a.report.elbo.len(), 20);
        let p = a.prediction.unwrap();
        assert_eq!(p.times, a.dataset.test[0].times);
        assert_eq!(a.cumulative.len(), p.times.len());
    }

    #[test]
    fn task2_averages_over_test_trajectories() {
        let cfg = quick(2, System::Fp, Mode::GpodeShooting);
        let out = run(&cfg).unwrap();
        assert_eq!(out.metrics.per_trajectory.len(), 25);
        let (s, _, e) = mean_metrics(&out.metrics.per_trajectory);
        assert_eq!(out.metrics.state_rmse, s);
        assert_eq!(out.metrics.energy_rmse, e);
        assert_eq!(out.state.states.len(), 2);
    }

    #[test]
    fn every_mode_runs() {
        for mode in Mode::ALL {
            let mut cfg = quick(1, System::Fp, mode);
            cfg.iterations = 3;
            let out = run(&cfg).unwrap();
            assert!(out.metrics.state_rmse.is_finite(), "{mode}");
        }
    }

    #[test]
    fn toy_reports_energy_errors() {
        let mut cfg = quick(1, System::Fp, Mode::HgpStandard);
        cfg.train_length = Some(1.0);
        let out = run_toy(&cfg, 2.0).unwrap();
        assert_eq!(out.energy_errors.len(), out.prediction.samples.len() * 31);
        assert!(out.median_energy_error >= 0.0);
    }
}
