//! Median and interquartile range across seeds.

use anyhow::{ensure, Result};
use serde::{Deserialize, Serialize};

use crate::metrics::MetricsRecord;

/// Linearly interpolated quantile of unsorted values; `NaN` when empty.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (q1, q3) = (quantile(values, 0.25), quantile(values, 0.75));
        Stat {
            median: median(values),
            q1,
            q3,
            iqr: q3 - q1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub state_rmse: f64,
    pub state_mnll: f64,
    pub energy_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub state_rmse: Stat,
    pub state_mnll: Stat,
    pub energy_rmse: Stat,
    pub per_seed: Vec<SeedRow>,
}

/// Summaries of runs that share task, system and mode.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary> {
    ensure!(!records.is_empty(), "nothing to aggregate");
    let first = &records[0];
    ensure!(
        records
            .iter()
            .all(|r| r.task == first.task && r.system == first.system && r.mode == first.mode),
        "records mix tasks, systems or modes"
    );
    let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    Ok(Summary {
        count: records.len(),
        state_rmse: Stat::of(&col(|r| r.state_rmse)),
        state_mnll: Stat::of(&col(|r| r.state_mnll)),
        energy_rmse: Stat::of(&col(|r| r.energy_rmse)),
        per_seed: records
            .iter()
            .map(|r| SeedRow {
                seed: r.seed,
                state_rmse: r.state_rmse,
                state_mnll: r.state_mnll,
                energy_rmse: r.energy_rmse,
            })
            .collect(),
    })
}
