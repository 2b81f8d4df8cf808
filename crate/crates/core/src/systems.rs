//! Benchmark Hamiltonian systems and synthetic trajectory data.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Tensor;
use crate::odeint::{integrate_from, SolverSpec, VectorField};

/// Rejection-sampling budget for initial conditions.
pub const MAX_INITIAL_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Fixed pendulum, `(q, p)`.
    Fp,
    /// Spring pendulum, `(q1, q2, p1, p2)`.
    Sp,
    /// Hénon–Heiles, `(q1, q2, p1, p2)`.
    Hh,
}

impl System {
    pub const ALL: [System; 3] = [System::Fp, System::Sp, System::Hh];

    /// Phase-space dimension `2D`.
    pub fn dim(self) -> usize {
        match self {
            System::Fp => 2,
            System::Sp | System::Hh => 4,
        }
    }

    pub fn train_rate(self) -> f64 {
        match self {
            System::Fp => 8.0,
            System::Sp => 6.0,
            System::Hh => 4.0,
        }
    }

    pub fn test_rate(self) -> f64 {
        match self {
            System::Fp => 15.0,
            System::Sp | System::Hh => 10.0,
        }
    }

    /// Training horizon (seconds) for forecasting.
    pub fn forecast_length(self) -> f64 {
        match self {
            System::Fp => 8.0,
            System::Sp => 16.0,
            System::Hh => 40.0,
        }
    }

    /// Training horizon (seconds) for initial-condition extrapolation.
    pub fn extrapolation_length(self) -> f64 {
        match self {
            System::Fp => 4.0,
            System::Sp => 6.0,
            System::Hh => 12.0,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Fp => "fp",
            System::Sp => "sp",
            System::Hh => "hh",
        })
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp" => Ok(System::Fp),
            "sp" => Ok(System::Sp),
            "hh" => Ok(System::Hh),
            other => Err(Error::invalid(format!("unknown system `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub mass: f64,
    pub rest_length: f64,
    pub gravity: f64,
    pub spring_k: f64,
    pub hh_mu: f64,
}

impl SystemParams {
    pub fn defaults(system: System) -> Self {
        SystemParams {
            mass: 1.0,
            rest_length: if system == System::Sp { 3.0 } else { 1.0 },
            gravity: 9.81,
            spring_k: 10.0,
            hh_mu: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mass,
            self.rest_length,
            self.gravity,
            self.spring_k,
            self.hh_mu,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(
                "system parameters must be positive and finite",
            ))
        }
    }
}

fn sp_radius(q1: f64, params: &SystemParams) -> Result<f64> {
    let r = q1 + params.rest_length;
    if r == 0.0 {
        return Err(Error::Domain(
            "spring pendulum momentum term is singular at q1 + r = 0".into(),
        ));
    }
    Ok(r)
}

/// Energy of `x` in raw coordinates.
pub fn true_h(system: System, params: &SystemParams, x: &[f64]) -> Result<f64> {
    check_dim("true_h state", system.dim(), x.len())?;
    let SystemParams {
        mass: m,
        rest_length: r,
        gravity: g,
        spring_k: k,
        hh_mu: mu,
    } = *params;
    Ok(match system {
        System::Fp => m * g * r * (1.0 - x[0].cos()) + x[1] * x[1] / (2.0 * m * r * r),
        System::Sp => {
            let (q1, q2, p1, p2) = (x[0], x[1], x[2], x[3]);
            let rad = sp_radius(q1, params)?;
            (p1 * p1 + p2 * p2 / (rad * rad)) / (2.0 * m) + 0.5 * k * q1 * q1 - m * g * r * q2.cos()
        }
        System::Hh => {
            let (q1, q2, p1, p2) = (x[0], x[1], x[2], x[3]);
            0.5 * (q1 * q1 + q2 * q2 + p1 * p1 + p2 * p2) + mu * (q2 * q1 * q1 - q2 * q2 * q2 / 3.0)
        }
    })
}

/// Hamilton's equations `(∂H/∂p, −∂H/∂q)` at `x`.
pub fn true_field(system: System, params: &SystemParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("true_field state", system.dim(), x.len())?;
    let mut out = vec![0.0; x.len()];
    if system == System::Sp {
        sp_radius(x[0], params)?;
    }
    field_into(system, params, x, &mut out);
    Ok(out)
}

fn field_into(system: System, params: &SystemParams, x: &[f64], out: &mut [f64]) {
    let SystemParams {
        mass: m,
        rest_length: r,
        gravity: g,
        spring_k: k,
        hh_mu: mu,
    } = *params;
    match system {
        System::Fp => {
            out[0] = x[1] / (m * r * r);
            out[1] = -m * g * r * x[0].sin();
        }
        System::Sp => {
            let (q1, q2, p1, p2) = (x[0], x[1], x[2], x[3]);
            let rad = q1 + r;
            out[0] = p1 / m;
            out[1] = p2 / (m * rad * rad);
            out[2] = p2 * p2 / (m * rad * rad * rad) - k * q1;
            out[3] = -m * g * r * q2.sin();
        }
        System::Hh => {
            let (q1, q2, p1, p2) = (x[0], x[1], x[2], x[3]);
            out[0] = p1;
            out[1] = p2;
            out[2] = -q1 - 2.0 * mu * q1 * q2;
            out[3] = -q2 - mu * (q1 * q1 - q2 * q2);
        }
    }
}

/// Ground-truth dynamics as an integrable field.
#[derive(Clone, Copy, Debug)]
pub struct TrueField {
    pub system: System,
    pub params: SystemParams,
}

impl VectorField for TrueField {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        field_into(self.system, &self.params, x, out)
    }
}

/// Upper energy limit for accepted initial conditions, if the system has one.
pub fn energy_cutoff(system: System, params: &SystemParams) -> Option<f64> {
    match system {
        System::Fp => Some(params.mass * params.gravity * params.rest_length),
        System::Sp => None,
        System::Hh => Some(1.0 / (6.0 * params.hh_mu * params.hh_mu)),
    }
}

/// Draw one initial condition: uniform box, then energy rejection
/// (accepting `E <= cutoff`).
pub fn sample_initial<R: Rng + ?Sized>(
    system: System,
    params: &SystemParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let half_width = match system {
        System::Fp | System::Hh => 1.0,
        System::Sp => 0.25,
    };
    let cutoff = energy_cutoff(system, params);
    for _ in 0..MAX_INITIAL_ATTEMPTS {
        let x: Vec<f64> = (0..system.dim())
            .map(|_| rng.random_range(-half_width..half_width))
            .collect();
        match cutoff {
            Some(c) if true_h(system, params, &x)? > c => continue,
            _ => return Ok(x),
        }
    }
    Err(Error::SamplerExhausted {
        attempts: MAX_INITIAL_ATTEMPTS,
    })
}

/// States on a time grid, one row per time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Tensor,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Tensor) -> Result<Self> {
        check_dim("trajectory length", times.len(), states.rows())?;
        Ok(Trajectory { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit to every row of every trajectory (population statistics).
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self> {
        let dim = trajectories
            .first()
            .ok_or_else(|| Error::invalid("no trajectories to standardise"))?
            .dim();
        let n: usize = trajectories.iter().map(Trajectory::len).sum();
        let mut mean = vec![0.0; dim];
        for t in trajectories {
            for r in 0..t.len() {
                for (m, v) in mean.iter_mut().zip(t.states.row(r)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for t in trajectories {
            for r in 0..t.len() {
                for ((s, v), m) in var.iter_mut().zip(t.states.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("cannot standardise a constant dimension"));
        }
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    fn map_rows(&self, states: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..states.rows()).map(|r| f(states.row(r))).collect();
        Tensor::from_rows(&rows)
    }

    pub fn apply_trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            times: t.times.clone(),
            states: self.map_rows(&t.states, |x| self.apply(x)),
        }
    }

    pub fn invert_trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            times: t.times.clone(),
            states: self.map_rows(&t.states, |x| self.invert(x)),
        }
    }
}

/// How test trajectories relate to the training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestProtocol {
    /// Continue each training trajectory over `[T, 2T]`.
    Continuation,
    /// Fresh initial conditions rolled out for `length_factor * T`.
    FreshInitial { count: usize, length_factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub system: System,
    pub params: SystemParams,
    /// Training horizon in seconds.
    pub train_length: f64,
    pub train_rate: f64,
    pub test_rate: f64,
    /// Noise variance as a fraction of each dimension's signal variance.
    pub noise_fraction: f64,
    pub n_train: usize,
    pub test: TestProtocol,
    pub seed: u64,
}

impl DatasetSpec {
    /// Single-trajectory forecasting setup.
    pub fn forecasting(system: System, seed: u64) -> Self {
        DatasetSpec {
            system,
            params: SystemParams::defaults(system),
            train_length: system.forecast_length(),
            train_rate: system.train_rate(),
            test_rate: system.test_rate(),
            noise_fraction: 0.05,
            n_train: 1,
            test: TestProtocol::Continuation,
            seed,
        }
    }

    /// Multi-trajectory initial-condition extrapolation setup.
    pub fn extrapolation(system: System, seed: u64) -> Self {
        DatasetSpec {
            system,
            params: SystemParams::defaults(system),
            train_length: system.extrapolation_length(),
            train_rate: system.train_rate(),
            test_rate: system.test_rate(),
            noise_fraction: 0.05,
            n_train: 8,
            test: TestProtocol::FreshInitial {
                count: 25,
                length_factor: 3.0,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.train_rate > 0.0 && self.test_rate > 0.0) {
            return Err(Error::invalid("sampling rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::invalid("noise fraction must lie in [0, 1)"));
        }
        if self.n_train == 0 || self.train_points() < 2 {
            return Err(Error::invalid("need at least one trajectory of two points"));
        }
        Ok(())
    }

    /// Observations per training trajectory: `round(T · rate)`.
    pub fn train_points(&self) -> usize {
        (self.train_length * self.train_rate).round() as usize
    }

    pub fn train_times(&self) -> Vec<f64> {
        (0..self.train_points())
            .map(|i| i as f64 / self.train_rate)
            .collect()
    }

    /// Times of the clean test trajectories, both ends included.
    pub fn test_times(&self) -> Vec<f64> {
        let (start, length) = match self.test {
            TestProtocol::Continuation => (self.train_length, self.train_length),
            TestProtocol::FreshInitial { length_factor, .. } => {
                (0.0, self.train_length * length_factor)
            }
        };
        let n = (length * self.test_rate).round() as usize;
        (0..=n).map(|i| start + i as f64 / self.test_rate).collect()
    }
}

/// Generated data. All trajectories are in standardised coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub standardization: Standardization,
    /// Noisy training observations.
    pub train: Vec<Trajectory>,
    /// The same trajectories without noise.
    pub train_clean: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Raw-coordinate noise variance per dimension.
    pub noise_var: Vec<f64>,
}

impl Dataset {
    /// True energy of every state of a standardised trajectory.
    pub fn energies(&self, t: &Trajectory) -> Result<Vec<f64>> {
        let raw = self.standardization.invert_trajectory(t);
        (0..raw.len())
            .map(|r| true_h(self.spec.system, &self.spec.params, raw.states.row(r)))
            .collect()
    }

    pub fn true_field(&self) -> TrueField {
        TrueField {
            system: self.spec.system,
            params: self.spec.params,
        }
    }
}

/// Solver used to generate ground truth.
pub fn reference_solver() -> SolverSpec {
    SolverSpec::dopri5(1e-10, 1e-12)
}

fn rollout_raw(field: &TrueField, x0: &[f64], times: &[f64]) -> Result<Trajectory> {
    let states = integrate_from(field, x0, 0.0, times, &reference_solver())?;
    Trajectory::new(times.to_vec(), Tensor::from_rows(&states))
}

/// Sample initial conditions, integrate, add noise and standardise.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let field = TrueField {
        system: spec.system,
        params: spec.params,
    };
    let dim = spec.system.dim();
    let train_ics: Vec<Vec<f64>> = (0..spec.n_train)
        .map(|_| sample_initial(spec.system, &spec.params, &mut rng))
        .collect::<Result<_>>()?;
    let test_ics = match spec.test {
        TestProtocol::Continuation => train_ics.clone(),
        TestProtocol::FreshInitial { count, .. } => (0..count)
            .map(|_| sample_initial(spec.system, &spec.params, &mut rng))
            .collect::<Result<_>>()?,
    };

    let train_times = spec.train_times();
    let test_times = spec.test_times();
    let clean_raw: Vec<Trajectory> = train_ics
        .iter()
        .map(|x0| rollout_raw(&field, x0, &train_times))
        .collect::<Result<_>>()?;
    let test_raw: Vec<Trajectory> = test_ics
        .iter()
        .map(|x0| rollout_raw(&field, x0, &test_times))
        .collect::<Result<_>>()?;

    let signal = Standardization::fit(&clean_raw)?;
    let noise_var: Vec<f64> = signal
        .std
        .iter()
        .map(|s| spec.noise_fraction * s * s)
        .collect();
    let noisy_raw: Vec<Trajectory> = clean_raw
        .iter()
        .map(|t| {
            let mut states = t.states.clone();
            if spec.noise_fraction > 0.0 {
                for r in 0..states.rows() {
                    for (d, v) in states.row_mut(r).iter_mut().enumerate() {
                        let n = Normal::new(0.0, noise_var[d].sqrt()).expect("finite noise scale");
                        *v += n.sample(&mut rng);
                    }
                }
            }
            Trajectory {
                times: t.times.clone(),
                states,
            }
        })
        .collect();
    debug_assert!(noisy_raw.iter().all(|t| t.dim() == dim));

    let standardization = Standardization::fit(&noisy_raw)?;
    let train = noisy_raw
        .iter()
        .map(|t| standardization.apply_trajectory(t))
        .collect();
    let train_clean = clean_raw
        .iter()
        .map(|t| standardization.apply_trajectory(t))
        .collect();
    let test = test_raw
        .iter()
        .map(|t| standardization.apply_trajectory(t))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        standardization,
        train,
        train_clean,
        test,
        noise_var,
    })
}
