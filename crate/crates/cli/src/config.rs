//! Experiment configuration, read from flat `key = value` files.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hgp::field::FieldKind;
use hgp::odeint::SolverSpec;
use hgp::systems::{DatasetSpec, System};
use hgp::vi::Bound;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HgpStandard,
    HgpShooting,
    HgpEnergyShooting,
    HgpBatched,
    GpodeShooting,
    /// Independent-output baseline without shooting.
    GpodeStandard,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::HgpStandard,
        Mode::HgpShooting,
        Mode::HgpEnergyShooting,
        Mode::HgpBatched,
        Mode::GpodeShooting,
        Mode::GpodeStandard,
    ];

    pub fn kind(self) -> FieldKind {
        match self {
            Mode::GpodeShooting | Mode::GpodeStandard => FieldKind::Independent,
            _ => FieldKind::Hamiltonian,
        }
    }

    pub fn bound(self) -> Bound {
        match self {
            Mode::HgpStandard | Mode::HgpBatched | Mode::GpodeStandard => Bound::Standard,
            Mode::HgpShooting | Mode::GpodeShooting => Bound::Shooting,
            Mode::HgpEnergyShooting => Bound::EnergyShooting,
        }
    }

    pub fn batched(self) -> bool {
        self == Mode::HgpBatched
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::HgpStandard => "hgp_standard",
            Mode::HgpShooting => "hgp_shooting",
            Mode::HgpEnergyShooting => "hgp_energy_shooting",
            Mode::HgpBatched => "hgp_batched",
            Mode::GpodeShooting => "gpode_shooting",
            Mode::GpodeStandard => "gpode_standard",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| anyhow!("unknown inference mode `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// 1: forecasting, 2: initial-condition extrapolation.
    pub task: u8,
    pub system: System,
    pub mode: Mode,
    pub inducing: usize,
    pub basis: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Solver for prediction rollouts; training always uses fixed-step RK4.
    pub solver: SolverSpec,
    /// Observations per shooting state.
    pub obs_per_state: usize,
    pub noise_fraction: f64,
    /// Training trajectories (task 2).
    pub trajectories: usize,
    pub paths: usize,
    /// Training horizon in seconds; the system default when absent.
    pub train_length: Option<f64>,
    /// RK4 step is the smallest observation spacing divided by this.
    pub step_divisor: f64,
    pub batch_window: usize,
    pub batch_size: usize,
}

impl RunConfig {
    pub fn new(task: u8, system: System) -> Self {
        RunConfig {
            task,
            system,
            mode: Mode::HgpEnergyShooting,
            inducing: if task == 2 { 128 } else { 48 },
            basis: 256,
            iterations: 2500,
            lr: 3e-3,
            seed: 0,
            solver: SolverSpec::default(),
            obs_per_state: 4,
            noise_fraction: 0.05,
            trajectories: 8,
            paths: hgp::vi::DEFAULT_PATHS,
            train_length: None,
            step_divisor: 10.0,
            batch_window: hgp::vi::BATCH_WINDOW,
            batch_size: 16,
        }
    }

    /// Parse a config file. `task` and `system` select the defaults for
    /// everything else and may appear anywhere in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let lookup = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v)
        };
        let task = match lookup("task") {
            Some(v) => v.parse().context("task")?,
            None => 1,
        };
        let system = match lookup("system") {
            Some(v) => v.parse()?,
            None => System::Fp,
        };
        let mut cfg = RunConfig::new(task, system);
        for (n, k, v) in &pairs {
            cfg.set(k, v).with_context(|| format!("line {n}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            v.parse::<T>()
                .with_context(|| format!("invalid value for `{key}`: `{v}`"))
        }
        match key {
            "task" => self.task = num(key, value)?,
            "system" => self.system = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "inducing" => self.inducing = num(key, value)?,
            "basis" => self.basis = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "solver" => self.solver = parse_solver(value)?,
            "obs_per_state" => self.obs_per_state = num(key, value)?,
            "noise_fraction" => self.noise_fraction = num(key, value)?,
            "trajectories" => self.trajectories = num(key, value)?,
            "paths" => self.paths = num(key, value)?,
            "train_length" => self.train_length = Some(num(key, value)?),
            "step_divisor" => self.step_divisor = num(key, value)?,
            "batch_window" => self.batch_window = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.task, 1 | 2) {
            bail!("task must be 1 or 2");
        }
        if self.inducing == 0 || self.basis == 0 || self.paths == 0 || self.trajectories == 0 {
            bail!("inducing, basis, paths and trajectories must be positive");
        }
        if !(self.lr > 0.0 && self.step_divisor > 0.0) {
            bail!("lr and step_divisor must be positive");
        }
        if self.train_length.is_some_and(|t| !(t > 0.0)) {
            bail!("train_length must be positive");
        }
        self.dataset_spec().validate()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = if self.task == 2 {
            let mut s = DatasetSpec::extrapolation(self.system, self.seed);
            s.n_train = self.trajectories;
            s
        } else {
            DatasetSpec::forecasting(self.system, self.seed)
        };
        spec.noise_fraction = self.noise_fraction;
        if let Some(t) = self.train_length {
            spec.train_length = t;
        }
        spec
    }

    /// Serialise back to the `key = value` format.
    pub fn to_text(&self) -> String {
        let solver = match self.solver {
            SolverSpec::Rk4 { step } => format!("rk4:{step}"),
            SolverSpec::Dopri5 { rtol, atol } => format!("dopri5:{rtol}:{atol}"),
        };
        let mut s = format!(
            "task = {}\nsystem = {}\nmode = {}\ninducing = {}\nbasis = {}\niterations = {}\n\
             lr = {}\nseed = {}\nsolver = {}\nobs_per_state = {}\nnoise_fraction = {}\n\
             trajectories = {}\npaths = {}\nstep_divisor = {}\nbatch_window = {}\nbatch_size = {}\n",
            self.task,
            self.system,
            self.mode,
            self.inducing,
            self.basis,
            self.iterations,
            self.lr,
            self.seed,
            solver,
            self.obs_per_state,
            self.noise_fraction,
            self.trajectories,
            self.paths,
            self.step_divisor,
            self.batch_window,
            self.batch_size,
        );
        if let Some(t) = self.train_length {
            s.push_str(&format!("train_length = {t}\n"));
        }
        s
    }
}

/// `rk4:<step>` or `dopri5[:<rtol>:<atol>]`.
pub fn parse_solver(v: &str) -> Result<SolverSpec> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let f = |s: &str| {
        s.parse::<f64>()
            .with_context(|| format!("invalid solver number `{s}`"))
    };
    Ok(match parts.as_slice() {
        ["rk4", step] => SolverSpec::rk4(f(step)?),
        ["dopri5"] => SolverSpec::default(),
        ["dopri5", rtol, atol] => SolverSpec::dopri5(f(rtol)?, f(atol)?),
        _ => bail!("unknown solver `{v}`"),
    })
}
