//! Variational posterior, evidence lower bounds, initialisation, training and
//! prediction.
//!
//! `q(u)` is held whitened: `u = L_K v` with `v ~ N(m̃, L̃ L̃ᵀ)` and prior
//! `v ~ N(0, I)`. Trajectory states use diagonal Gaussians: the first state of
//! each trajectory has prior `N(0, I)`, later shooting states are tied to the
//! rollout of the previous segment by a tolerance prior.

mod bound;
mod init;
mod predict;
mod train;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::FieldKind;
use crate::grad::{ParamRole, Parameter};
use crate::kernel::KernelHyper;
use crate::linalg::Tensor;
use crate::odeint::SegmentPlan;

pub use bound::{elbo, elbo_with_gradient, BoundOptions, ElboDraws, ElboTerms};
pub use init::{hamiltonian_init, independent_init, initialize, numerical_derivatives, InitConfig};
pub use predict::{
    gaussian_mnll, predict, sample_field, InitialCondition, Prediction, DEFAULT_PATHS,
};
pub use train::{
    train, train_batched, windows, BatchConfig, Snapshot, TrainConfig, TrainReport, BATCH_WINDOW,
};

/// Default between-segment state tolerance `σ_ξ²`.
pub const SHOOT_VAR: f64 = 1e-6;
/// Default between-segment energy tolerance `σ_χ²`.
pub const ENERGY_VAR: f64 = 2.5e-3;

/// Which evidence lower bound to optimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// One rollout per trajectory from its initial state.
    Standard,
    /// Independent segments tied by a state tolerance prior.
    Shooting,
    /// Shooting with an additional energy tolerance prior.
    EnergyShooting,
}

impl Bound {
    pub fn uses_shooting(self) -> bool {
        !matches!(self, Bound::Standard)
    }
}

/// Fixed tolerance variances of the shooting prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub shoot_var: f64,
    pub energy_var: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            shoot_var: SHOOT_VAR,
            energy_var: ENERGY_VAR,
        }
    }
}

/// Diagonal Gaussians over the shooting states of one trajectory. State 0 is
/// the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePosterior {
    pub plan: SegmentPlan,
    /// `1 x 2D`.
    pub initial_mean: Tensor,
    pub initial_log_std: Tensor,
    /// `(L - 1) x 2D`.
    pub shooting_mean: Tensor,
    pub shooting_log_std: Tensor,
}

impl StatePosterior {
    /// Means at the observations where each segment starts, all standard
    /// deviations equal to `std`.
    pub fn at_observations(observations: &Tensor, plan: SegmentPlan, std: f64) -> Result<Self> {
        check_dim(
            "state posterior observations",
            plan.n_obs(),
            observations.rows(),
        )?;
        let dim = observations.cols();
        let starts = plan.starts();
        let rows: Vec<Vec<f64>> = starts[1..]
            .iter()
            .map(|&s| observations.row(s).to_vec())
            .collect();
        let shooting_mean = if rows.is_empty() {
            Tensor::zeros(0, dim)
        } else {
            Tensor::from_rows(&rows)
        };
        Ok(StatePosterior {
            initial_mean: Tensor::from_vec(1, dim, observations.row(0).to_vec()),
            initial_log_std: Tensor::filled(1, dim, std.ln()),
            shooting_log_std: Tensor::filled(rows.len(), dim, std.ln()),
            shooting_mean,
            plan,
        })
    }

    /// Number of shooting states `L`.
    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.initial_mean.cols()
    }

    /// All state means, `L x 2D`.
    pub fn means(&self) -> Tensor {
        stack(&self.initial_mean, &self.shooting_mean)
    }

    /// All state standard deviations, `L x 2D`.
    pub fn stds(&self) -> Tensor {
        stack(&self.initial_log_std, &self.shooting_log_std).map(f64::exp)
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

/// Everything optimised during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub kind: FieldKind,
    /// Number of Fourier bases `S` per sample.
    pub basis_count: usize,
    /// `M x 2D`.
    pub inducing: Tensor,
    /// `(n_out · M) x 1`, output blocks stacked.
    pub whitened_mean: Tensor,
    /// `(n_out · M) x M`: per output, strict lower part of `L̃` with its
    /// log-diagonal on the diagonal.
    pub whitened_chol: Tensor,
    /// `2D x 1`.
    pub log_lengthscales: Tensor,
    pub log_signal_variance: Tensor,
    pub log_obs_var: Tensor,
    /// One per training trajectory; empty when initial states are given.
    pub states: Vec<StatePosterior>,
    pub noise: NoiseModel,
}

impl ModelState {
    pub fn dim(&self) -> usize {
        self.inducing.cols()
    }

    pub fn outputs(&self) -> usize {
        self.kind.outputs(self.dim())
    }

    pub fn inducing_count(&self) -> usize {
        self.inducing.rows()
    }

    pub fn hyper(&self) -> KernelHyper {
        KernelHyper {
            log_lengthscales: self.log_lengthscales.data().to_vec(),
            log_signal_variance: self.log_signal_variance.item(),
        }
    }

    pub fn obs_var(&self) -> f64 {
        self.log_obs_var.item().exp()
    }

    /// Whitened mean and lower factor of output `o`.
    pub fn whitened(&self, o: usize) -> (Vec<f64>, Tensor) {
        let m = self.inducing_count();
        let mean = self.whitened_mean.data()[o * m..(o + 1) * m].to_vec();
        let mut chol = Tensor::from_vec(
            m,
            m,
            self.whitened_chol.data()[o * m * m..(o + 1) * m * m].to_vec(),
        )
        .lower();
        for i in 0..m {
            chol[(i, i)] = chol[(i, i)].exp();
        }
        (mean, chol)
    }

    /// Set output `o` of `q(v)` from a mean and a lower factor with positive diagonal.
    pub fn set_whitened(&mut self, o: usize, mean: &[f64], chol: &Tensor) -> Result<()> {
        let m = self.inducing_count();
        check_dim("whitened mean", m, mean.len())?;
        check_dim("whitened chol", m, chol.rows())?;
        if (0..m).any(|i| !(chol[(i, i)] > 0.0)) {
            return Err(Error::invalid("whitened chol needs a positive diagonal"));
        }
        self.whitened_mean.data_mut()[o * m..(o + 1) * m].copy_from_slice(mean);
        let block = &mut self.whitened_chol.data_mut()[o * m * m..(o + 1) * m * m];
        for i in 0..m {
            for j in 0..m {
                block[i * m + j] = match i.cmp(&j) {
                    std::cmp::Ordering::Greater => chol[(i, j)],
                    std::cmp::Ordering::Equal => chol[(i, i)].ln(),
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        Ok(())
    }

    /// Every optimised tensor with its role, in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.roles()
            .into_iter()
            .zip(self.tensors())
            .map(|(role, t)| Parameter::new(role, t.clone()))
            .collect()
    }

    /// Overwrite the optimised tensors from a list produced by [`Self::parameters`].
    pub fn set_parameters(&mut self, params: &[Parameter]) -> Result<()> {
        let roles = self.roles();
        check_dim("parameter count", roles.len(), params.len())?;
        for ((role, t), p) in roles.into_iter().zip(self.tensors_mut()).zip(params) {
            if p.role != role || p.value.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {:?} does not match the model layout",
                    p.role
                )));
            }
            *t = p.value.clone();
        }
        Ok(())
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        let mut roles = vec![
            ParamRole::WhitenedMean,
            ParamRole::WhitenedChol,
            ParamRole::InducingInputs,
            ParamRole::LogLengthscale,
            ParamRole::LogSignalVariance,
            ParamRole::LogObsNoise,
        ];
        for _ in &self.states {
            roles.extend([
                ParamRole::InitialStateMean,
                ParamRole::InitialStateLogStd,
                ParamRole::ShootingMean,
                ParamRole::ShootingLogStd,
            ]);
        }
        roles
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.whitened_mean,
            &self.whitened_chol,
            &self.inducing,
            &self.log_lengthscales,
            &self.log_signal_variance,
            &self.log_obs_var,
        ];
        for s in &self.states {
            out.extend([
                &s.initial_mean,
                &s.initial_log_std,
                &s.shooting_mean,
                &s.shooting_log_std,
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.whitened_mean,
            &mut self.whitened_chol,
            &mut self.inducing,
            &mut self.log_lengthscales,
            &mut self.log_signal_variance,
            &mut self.log_obs_var,
        ];
        for s in &mut self.states {
            out.extend([
                &mut s.initial_mean,
                &mut s.initial_log_std,
                &mut s.shooting_mean,
                &mut s.shooting_log_std,
            ]);
        }
        out
    }
}

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim("gaussian variance", mean.len(), var.len())?;
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// `KL[q ‖ p]` in closed form.
pub fn kl_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("kl dimensions", p.mean.len(), q.mean.len())?;
    if p.var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("reference covariance is singular"));
    }
    if q.var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("variances must be positive"));
    }
    Ok(q.mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((mq, vq), (mp, vp))| 0.5 * (vq / vp + (mq - mp).powi(2) / vp - 1.0 + (vp / vq).ln()))
        .sum())
}

/// Differential entropy `½ Σ (1 + log 2π + log σ_d²)`.
pub fn entropy_gaussian(q: &DiagGaussian) -> Result<f64> {
    if q.var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("variances must be positive"));
    }
    Ok(q.var
        .iter()
        .map(|v| 0.5 * (1.0 + (2.0 * PI).ln() + v.ln()))
        .sum())
}

/// `KL[N(m, L Lᵀ) ‖ N(0, I)]` for lower-triangular `L` with positive diagonal.
pub fn kl_whitened(mean: &[f64], chol: &Tensor) -> Result<f64> {
    check_dim("whitened kl", mean.len(), chol.rows())?;
    let n = mean.len();
    let mut trace = 0.0;
    let mut logdet = 0.0;
    for i in 0..n {
        let d = chol[(i, i)];
        if !(d > 0.0) {
            return Err(Error::invalid("whitened chol needs a positive diagonal"));
        }
        logdet += 2.0 * d.ln();
        for j in 0..=i {
            trace += chol[(i, j)] * chol[(i, j)];
        }
    }
    let quad: f64 = mean.iter().map(|m| m * m).sum();
    Ok(0.5 * (trace + quad - n as f64 - logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kl_reference_values() {
        let p = DiagGaussian::standard(1);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        let q = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        let singular = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert!(kl_gaussian(&q, &singular).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        let h = entropy_gaussian(&DiagGaussian::standard(1)).unwrap();
        assert!((h - 1.418_938_533_204_672_7).abs() < 1e-12);
        let q = DiagGaussian::new(vec![0.0; 3], vec![0.7, 1.3, 2.0]).unwrap();
        let scaled = DiagGaussian::new(
            vec![0.0; 3],
            q.var
                .iter()
                .map(|v| v * std::f64::consts::E.powi(2))
                .collect(),
        )
        .unwrap();
        let diff = entropy_gaussian(&scaled).unwrap() - entropy_gaussian(&q).unwrap();
        assert!((diff - 3.0).abs() < 1e-12);
        assert!(entropy_gaussian(&DiagGaussian::new(vec![0.0], vec![-1.0]).unwrap()).is_err());
    }

    #[test]
    fn whitened_identity_has_zero_kl() {
        assert_eq!(kl_whitened(&[0.0; 5], &Tensor::identity(5)).unwrap(), 0.0);
        let l = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.2, 1.5]]);
        let kl = kl_whitened(&[0.3, -0.1], &l).unwrap();
        let diag = kl_gaussian(
            &DiagGaussian::new(vec![0.3, -0.1], vec![0.25, 0.04 + 2.25]).unwrap(),
            &DiagGaussian::standard(2),
        )
        .unwrap();
        // the full-covariance KL differs from the marginal one only in the log-determinant
        let det_gap = 0.5 * ((0.25f64 * 2.29).ln() - (0.25f64 * 2.25).ln());
        assert!((kl - diag - det_gap).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![0.4, -1.0], vec![0.5, 2.0]).unwrap();
        let p = DiagGaussian::new(vec![0.0, 0.5], vec![1.5, 0.8]).unwrap();
        let exact = kl_gaussian(&q, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200_000;
        let logpdf = |g: &DiagGaussian, x: &[f64]| -> f64 {
            x.iter()
                .zip(&g.mean)
                .zip(&g.var)
                .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * PI * v).ln()))
                .sum()
        };
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let x: Vec<f64> = q
                    .mean
                    .iter()
                    .zip(&q.var)
                    .map(|(m, v)| Normal::new(*m, v.sqrt()).unwrap().sample(&mut rng))
                    .collect();
                logpdf(&q, &x) - logpdf(&p, &x)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn whitened_blocks_round_trip() {
        let mut state = ModelState {
            kind: FieldKind::Independent,
            basis_count: 4,
            inducing: Tensor::zeros(2, 2),
            whitened_mean: Tensor::zeros(4, 1),
            whitened_chol: Tensor::zeros(4, 2),
            log_lengthscales: Tensor::zeros(2, 1),
            log_signal_variance: Tensor::scalar(0.0),
            log_obs_var: Tensor::scalar(0.0),
            states: vec![],
            noise: NoiseModel::default(),
        };
        let l = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.2, 1.5]]);
        state.set_whitened(1, &[0.3, -0.1], &l).unwrap();
        let (m, back) = state.whitened(1);
        assert_eq!(m, vec![0.3, -0.1]);
        for (a, b) in back.data().iter().zip(l.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(state.whitened(0), (vec![0.0, 0.0], Tensor::identity(2)));
        let params = state.parameters();
        assert_eq!(params.len(), 6);
        state.set_parameters(&params).unwrap();
    }
}
