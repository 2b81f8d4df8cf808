//! Wall-clock comparison of the standard and shooting bounds.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use hgp::systems::{generate, DatasetSpec, System};
use hgp::vi::{elbo, initialize, Bound, BoundOptions, ElboDraws, InitConfig, ModelState};
use serde::{Deserialize, Serialize};

use crate::aggregate::median;
use crate::runner::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub system: System,
    /// Trajectory lengths in seconds.
    pub lengths: Vec<f64>,
    pub workers: usize,
    pub inducing: usize,
    pub basis: usize,
    pub obs_per_state: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(lengths: Vec<f64>, workers: usize) -> Self {
        BenchConfig {
            system: System::Hh,
            lengths,
            workers,
            inducing: 48,
            basis: 256,
            obs_per_state: 4,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: f64,
    pub observations: usize,
    pub segments: usize,
    /// Median seconds per bound evaluation.
    pub standard_s: f64,
    pub shooting_s: f64,
    pub single_segment_s: f64,
    /// `standard_s / shooting_s`.
    pub speedup: f64,
}

fn time_bound(
    state: &ModelState,
    data: &[hgp::systems::Trajectory],
    bound: Bound,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, 3);
    let draws = ElboDraws::sample(state, &mut rng);
    let opts = BoundOptions::new(bound);
    elbo(state, data, &draws, &opts)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        elbo(state, data, &draws, &opts)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&times))
}

/// Time one evaluation of each bound at every length on a pool of
/// `workers` threads.
pub fn bench_elbo(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(
        cfg.lengths.len() >= 2,
        "need at least two trajectory lengths"
    );
    ensure!(
        cfg.workers >= 1 && cfg.repeats >= 1,
        "workers and repeats must be positive"
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("thread pool")?;
    pool.install(|| {
        cfg.lengths
            .iter()
            .map(|&length| {
                let mut spec = DatasetSpec::forecasting(cfg.system, cfg.seed);
                spec.train_length = length;
                let data = generate(&spec)?;
                let n = data.train[0].len();
                let mut rng = stream(cfg.seed, 4);
                let mut init = InitConfig::new(
                    hgp::field::FieldKind::Hamiltonian,
                    cfg.inducing,
                    Bound::Shooting,
                );
                init.basis_count = cfg.basis;
                init.obs_per_state = cfg.obs_per_state;
                let state = initialize(&data.train, &init, &mut rng)?;
                init.obs_per_state = n;
                let single = initialize(&data.train, &init, &mut stream(cfg.seed, 4))?;
                let standard_s =
                    time_bound(&state, &data.train, Bound::Standard, cfg.repeats, cfg.seed)?;
                let shooting_s =
                    time_bound(&state, &data.train, Bound::Shooting, cfg.repeats, cfg.seed)?;
                let single_segment_s =
                    time_bound(&single, &data.train, Bound::Shooting, cfg.repeats, cfg.seed)?;
                Ok(BenchRow {
                    length,
                    observations: n,
                    segments: state.states[0].len(),
                    standard_s,
                    shooting_s,
                    single_segment_s,
                    speedup: standard_s / shooting_s,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_one_row_per_length() {
        let mut cfg = BenchConfig::new(vec![2.0, 4.0], 2);
        cfg.inducing = 6;
        cfg.basis = 16;
        cfg.repeats = 2;
        let rows = bench_elbo(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].observations, 16);
        assert_eq!(rows[1].segments, 4);
        assert!(rows
            .iter()
            .all(|r| r.speedup > 0.0 && r.single_segment_s > 0.0));
        assert!(bench_elbo(&BenchConfig::new(vec![2.0], 1)).is_err());
    }
}
