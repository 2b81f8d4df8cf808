//! Forecast metrics: pooled state RMSE, moment-matched MNLL and true-energy RMSE.

use anyhow::{ensure, Result};
use hgp::linalg::Tensor;
use hgp::systems::{Dataset, Trajectory};
use hgp::vi::{gaussian_mnll, Prediction};
use serde::{Deserialize, Serialize};

use crate::config::Mode;

/// RMSE over every (time, dimension) residual.
pub fn state_rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    ensure!(
        pred.shape() == truth.shape(),
        "prediction and truth grids differ"
    );
    ensure!(!pred.is_empty(), "empty trajectories");
    let sq: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len() && !a.is_empty(),
        "series lengths differ or are empty"
    );
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub state_rmse: f64,
    pub state_mnll: f64,
    pub energy_rmse: f64,
    pub failed_paths: usize,
}

/// Metrics of one prediction against clean, standardised truth. Energies are
/// evaluated in raw coordinates.
pub fn trajectory_metrics(
    pred: &Prediction,
    truth: &Trajectory,
    obs_var: f64,
    data: &Dataset,
) -> Result<TrajectoryMetrics> {
    ensure!(
        pred.times.len() == truth.times.len()
            && pred
                .times
                .iter()
                .zip(&truth.times)
                .all(|(a, b)| (a - b).abs() < 1e-9),
        "prediction and truth time grids differ"
    );
    let mean = pred.mean_trajectory()?;
    Ok(TrajectoryMetrics {
        state_rmse: state_rmse(&pred.mean, &truth.states)?,
        state_mnll: gaussian_mnll(pred, truth, obs_var)?,
        energy_rmse: rmse(&data.energies(&mean)?, &data.energies(truth)?)?,
        failed_paths: pred.failures,
    })
}

/// Running sums over time of the squared state error (averaged over
/// dimensions) and of the squared energy error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub time: f64,
    pub state: f64,
    pub energy: f64,
}

pub fn cumulative_error(
    pred: &Prediction,
    truth: &Trajectory,
    data: &Dataset,
) -> Result<Vec<CumulativeRow>> {
    ensure!(
        pred.mean.shape() == truth.states.shape(),
        "prediction and truth grids differ"
    );
    let h_pred = data.energies(&pred.mean_trajectory()?)?;
    let h_true = data.energies(truth)?;
    let dim = truth.dim() as f64;
    let (mut s, mut e) = (0.0, 0.0);
    Ok((0..truth.len())
        .map(|i| {
            s += pred
                .mean
                .row(i)
                .iter()
                .zip(truth.states.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / dim;
            e += (h_pred[i] - h_true[i]).powi(2);
            CumulativeRow {
                time: truth.times[i],
                state: s,
                energy: e,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: u8,
    pub system: String,
    pub mode: Mode,
    pub seed: u64,
    /// Means over test trajectories.
    pub state_rmse: f64,
    pub state_mnll: f64,
    pub energy_rmse: f64,
    pub wall_time_s: f64,
    pub train_time_s: f64,
    /// Standardised state the forecast started from (task 1).
    pub forecast_origin: Option<Vec<f64>>,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.state_rmse,
            self.state_mnll,
            self.energy_rmse,
            self.wall_time_s,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Average per-trajectory metrics.
pub fn mean_metrics(items: &[TrajectoryMetrics]) -> (f64, f64, f64) {
    let n = items.len() as f64;
    let sum = |f: fn(&TrajectoryMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    (
        sum(|m| m.state_rmse),
        sum(|m| m.state_mnll),
        sum(|m| m.energy_rmse),
    )
}
