//! Data-driven initial values for the variational parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bound, ModelState, NoiseModel, StatePosterior};
use crate::error::{check_dim, Error, Result};
use crate::field::FieldKind;
use crate::kernel::{
    cross_gram, energy_field_cov, field_cov, gram, gram_chol_with_jitter, KernelHyper,
    DEFAULT_JITTER,
};
use crate::linalg::{cholesky, cholesky_solve, solve_lower, Tensor};
use crate::odeint::SegmentPlan;
use crate::systems::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub kind: FieldKind,
    pub inducing_count: usize,
    pub basis_count: usize,
    /// Decides how many shooting states each trajectory gets.
    pub bound: Bound,
    /// Observations per shooting state.
    pub obs_per_state: usize,
    /// Ridge on the derivative observations; estimated from the initial
    /// noise level when absent.
    pub ridge: Option<f64>,
    /// Standard deviation of the perturbation added to subsampled inducing inputs.
    pub inducing_perturbation: f64,
    /// Initial diagonal of the whitened factor `L̃`.
    pub chol_scale: f64,
    /// Initial `σ_obs²` as a fraction of the data variance.
    pub obs_var_fraction: f64,
    pub state_std: f64,
    pub noise: NoiseModel,
}

impl InitConfig {
    pub fn new(kind: FieldKind, inducing_count: usize, bound: Bound) -> Self {
        InitConfig {
            kind,
            inducing_count,
            basis_count: 256,
            bound,
            obs_per_state: 4,
            ridge: None,
            inducing_perturbation: 0.1,
            chol_scale: 0.1,
            obs_var_fraction: 0.1,
            state_std: 0.1,
            noise: NoiseModel::default(),
        }
    }
}

/// Finite-difference time derivatives: central inside, one-sided at the ends.
pub fn numerical_derivatives(traj: &Trajectory) -> Result<Tensor> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::invalid("derivatives need at least two observations"));
    }
    let dim = traj.dim();
    let t = &traj.times;
    let y = &traj.states;
    let mut out = Tensor::zeros(n, dim);
    for i in 0..n {
        let (a, b) = match i {
            0 => (0, 1),
            _ if i == n - 1 => (n - 2, n - 1),
            _ => (i - 1, i + 1),
        };
        let dt = t[b] - t[a];
        for d in 0..dim {
            out[(i, d)] = (y[(b, d)] - y[(a, d)]) / dt;
        }
    }
    Ok(out)
}

fn pooled(data: &[Trajectory]) -> Result<(Tensor, Tensor)> {
    let mut ys = Vec::new();
    let mut ds = Vec::new();
    for t in data {
        let d = numerical_derivatives(t)?;
        for r in 0..t.len() {
            ys.push(t.states.row(r).to_vec());
            ds.push(d.row(r).to_vec());
        }
    }
    if ys.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    Ok((Tensor::from_rows(&ys), Tensor::from_rows(&ds)))
}

fn whiten(z: &Tensor, hyp: &KernelHyper, mean: Tensor) -> Result<Tensor> {
    let (lk, _) = gram_chol_with_jitter(z, hyp, DEFAULT_JITTER)?;
    Ok(solve_lower(&lk, &mean))
}

/// Whitened inducing mean from conditioning the joint GP of `(H, f)` on
/// finite-difference derivatives:
/// `m = k_Hf(Z, Y) [K_f(Y, Y) + λ I]⁻¹ vec(Ẏ)`.
pub fn hamiltonian_init(
    data: &[Trajectory],
    z: &Tensor,
    hyp: &KernelHyper,
    ridge: f64,
) -> Result<Vec<f64>> {
    let (y, dy) = pooled(data)?;
    let (n, dim) = (y.rows(), y.cols());
    check_dim("inducing input dimension", dim, z.cols())?;
    let nd = n * dim;
    let mut kff = Tensor::zeros(nd, nd);
    for i in 0..n {
        for j in 0..=i {
            let block = field_cov(y.row(i), y.row(j), hyp)?;
            for a in 0..dim {
                for b in 0..dim {
                    kff[(i * dim + a, j * dim + b)] = block[(a, b)];
                    kff[(j * dim + b, i * dim + a)] = block[(a, b)];
                }
            }
        }
    }
    for i in 0..nd {
        kff[(i, i)] += ridge;
    }
    let mut khf = Tensor::zeros(z.rows(), nd);
    for m in 0..z.rows() {
        for j in 0..n {
            let c = energy_field_cov(z.row(m), y.row(j), hyp)?;
            khf.row_mut(m)[j * dim..(j + 1) * dim].copy_from_slice(&c);
        }
    }
    let l = cholesky(&kff)?;
    let alpha = cholesky_solve(&l, &Tensor::column(dy.into_vec()));
    let mean = khf.matmul(&alpha);
    Ok(whiten(z, hyp, mean)?.into_vec())
}

/// Whitened inducing means for independent per-dimension GPs on the field,
/// each conditioned on its finite-difference derivative. Output blocks are
/// stacked.
pub fn independent_init(
    data: &[Trajectory],
    z: &Tensor,
    hyp: &KernelHyper,
    ridge: f64,
) -> Result<Vec<f64>> {
    let (y, dy) = pooled(data)?;
    let mut k = gram(&y, hyp, 0.0)?;
    for i in 0..k.rows() {
        k[(i, i)] += ridge;
    }
    let l = cholesky(&k)?;
    let alpha = cholesky_solve(&l, &dy);
    let mean = cross_gram(z, &y, hyp)?.matmul(&alpha);
    let white = whiten(z, hyp, mean)?;
    Ok(white.transpose().into_vec())
}

/// Initial model for `data` (already standardised).
pub fn initialize<R: Rng + ?Sized>(
    data: &[Trajectory],
    cfg: &InitConfig,
    rng: &mut R,
) -> Result<ModelState> {
    if cfg.inducing_count == 0 || cfg.basis_count == 0 {
        return Err(Error::invalid("need inducing points and Fourier bases"));
    }
    let (y, _) = pooled(data)?;
    let (n, dim) = (y.rows(), y.cols());
    let m = cfg.inducing_count;

    let perturb = Normal::new(0.0, cfg.inducing_perturbation)
        .map_err(|_| Error::invalid("inducing perturbation must be non-negative"))?;
    let mut z = Tensor::zeros(m, dim);
    for i in 0..m {
        let src = i * n / m;
        for d in 0..dim {
            z[(i, d)] = y[(src, d)] + perturb.sample(rng);
        }
    }

    let hyp = KernelHyper::unit(dim);
    let mut var = 0.0;
    for d in 0..dim {
        let mean = (0..n).map(|r| y[(r, d)]).sum::<f64>() / n as f64;
        var += (0..n).map(|r| (y[(r, d)] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    let obs_var = cfg.obs_var_fraction * var / dim as f64;

    // derivative noise implied by the initial observation noise
    let spacing = data
        .iter()
        .flat_map(|t| t.times.windows(2).map(|w| w[1] - w[0]))
        .fold(f64::INFINITY, f64::min);
    let ridge = cfg.ridge.unwrap_or(if spacing.is_finite() {
        obs_var / (2.0 * spacing * spacing)
    } else {
        obs_var
    });

    let n_out = cfg.kind.outputs(dim);
    let whitened_mean = match cfg.kind {
        FieldKind::Hamiltonian => hamiltonian_init(data, &z, &hyp, ridge)?,
        FieldKind::Independent => independent_init(data, &z, &hyp, ridge)?,
    };
    let mut whitened_chol = Tensor::zeros(n_out * m, m);
    for o in 0..n_out {
        for i in 0..m {
            whitened_chol[(o * m + i, i)] = cfg.chol_scale.ln();
        }
    }

    let states = data
        .iter()
        .map(|t| {
            let plan = if cfg.bound.uses_shooting() {
                SegmentPlan::every(t.len(), cfg.obs_per_state)?
            } else {
                SegmentPlan::with_count(t.len(), 1)?
            };
            StatePosterior::at_observations(&t.states, plan, cfg.state_std)
        })
        .collect::<Result<_>>()?;

    Ok(ModelState {
        kind: cfg.kind,
        basis_count: cfg.basis_count,
        inducing: z,
        whitened_mean: Tensor::column(whitened_mean),
        whitened_chol,
        log_lengthscales: Tensor::column(hyp.log_lengthscales.clone()),
        log_signal_variance: Tensor::scalar(hyp.log_signal_variance),
        log_obs_var: Tensor::scalar(obs_var.ln()),
        states,
        noise: cfg.noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn circle(radius: f64, n: usize, dt: f64, phase: f64) -> Trajectory {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let rows: Vec<Vec<f64>> = times
            .iter()
            .map(|t| vec![radius * (t + phase).cos(), -radius * (t + phase).sin()])
            .collect();
        Trajectory::new(times, Tensor::from_rows(&rows)).unwrap()
    }

    #[test]
    fn derivatives_use_central_and_one_sided_differences() {
        let t = Trajectory::new(
            vec![0.0, 1.0, 3.0],
            Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 7.0]]),
        )
        .unwrap();
        let d = numerical_derivatives(&t).unwrap();
        assert_eq!(d.row(0), &[2.0, 0.0]);
        assert_eq!(d.row(1), &[4.0 / 3.0, 2.0]);
        assert_eq!(d.row(2), &[1.0, 3.0]);
        let one = Trajectory::new(vec![0.0], Tensor::zeros(1, 2)).unwrap();
        assert!(numerical_derivatives(&one).is_err());
    }

    fn k(x: &[f64], y: &[f64], ls: &[f64], var: f64) -> f64 {
        let s: f64 = x
            .iter()
            .zip(y)
            .zip(ls)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        var * (-0.5 * s).exp()
    }

    fn poisson(n: usize) -> DMatrix<f64> {
        let h = n / 2;
        DMatrix::from_fn(n, n, |a, b| {
            if a < h && b == a + h {
                1.0
            } else if a >= h && b + h == a {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn matches_dense_conditioning_oracle() {
        let data = [Trajectory::new(
            vec![0.0, 0.3, 0.5, 0.9],
            Tensor::from_rows(&[
                vec![0.1, 0.9],
                vec![0.5, 0.6],
                vec![0.8, 0.1],
                vec![0.6, -0.5],
            ]),
        )
        .unwrap()];
        let z = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.7, 0.0], vec![-0.4, -0.4]]);
        let hyp = KernelHyper::new(&[0.8, 1.3], 1.7).unwrap();
        let ridge = 0.05;
        let got = hamiltonian_init(&data, &z, &hyp, ridge).unwrap();

        let ls = hyp.lengthscales();
        let var = hyp.signal_variance();
        let y = &data[0].states;
        let dy = numerical_derivatives(&data[0]).unwrap();
        let (n, dim, h) = (4, 2, 1e-4);
        let p = poisson(dim);
        let shift = |x: &[f64], d: usize, e: f64| {
            let mut v = x.to_vec();
            v[d] += e;
            v
        };
        // gradient and mixed Hessian of the kernel by central differences
        let grad2 = |a: &[f64], b: &[f64]| {
            DVector::from_fn(dim, |d, _| {
                (k(a, &shift(b, d, h), &ls, var) - k(a, &shift(b, d, -h), &ls, var)) / (2.0 * h)
            })
        };
        let mixed = |a: &[f64], b: &[f64]| {
            DMatrix::from_fn(dim, dim, |i, j| {
                let f = |si: f64, sj: f64| k(&shift(a, i, si), &shift(b, j, sj), &ls, var);
                (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h)
            })
        };
        let mut kff = DMatrix::zeros(n * dim, n * dim);
        for i in 0..n {
            for j in 0..n {
                let block = &p * mixed(y.row(i), y.row(j)) * p.transpose();
                kff.view_mut((i * dim, j * dim), (dim, dim))
                    .copy_from(&block);
            }
        }
        kff += DMatrix::identity(n * dim, n * dim) * ridge;
        let mut khf = DMatrix::zeros(3, n * dim);
        for m in 0..3 {
            for j in 0..n {
                let c = &p * grad2(z.row(m), y.row(j));
                khf.view_mut((m, j * dim), (1, dim))
                    .copy_from(&c.transpose());
            }
        }
        let target = DVector::from_row_slice(dy.data());
        let mean = khf * kff.lu().solve(&target).unwrap();
        let kzz = DMatrix::from_fn(3, 3, |a, b| {
            k(z.row(a), z.row(b), &ls, var) + if a == b { DEFAULT_JITTER * var } else { 0.0 }
        });
        let lk = kzz.cholesky().unwrap().l();
        let want = lk.solve_lower_triangular(&mean).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn zero_derivative_gives_zero_mean() {
        let rows = vec![vec![0.3, -0.2]; 5];
        let data = [
            Trajectory::new((0..5).map(|i| i as f64).collect(), Tensor::from_rows(&rows)).unwrap(),
        ];
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.5]]);
        let m = hamiltonian_init(&data, &z, &KernelHyper::unit(2), 1e-3).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let m = independent_init(&data, &z, &KernelHyper::unit(2), 1e-3).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn recovers_oscillator_energy_shape() {
        let data: Vec<Trajectory> = [0.4, 0.8, 1.2, 1.6]
            .iter()
            .enumerate()
            .map(|(i, &r)| circle(r, 32, 0.2, i as f64))
            .collect();
        let mut z = Vec::new();
        for a in -3..=3 {
            for b in -3..=3 {
                z.push(vec![0.5 * a as f64, 0.5 * b as f64]);
            }
        }
        let z = Tensor::from_rows(&z);
        let hyp = KernelHyper::unit(2);
        let m = hamiltonian_init(&data, &z, &hyp, 1e-3).unwrap();
        let lk = crate::kernel::gram_chol(&z, &hyp, DEFAULT_JITTER).unwrap();
        let u = lk.matmul(&Tensor::column(m));
        let alpha = cholesky_solve(&lk, &u);
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for a in -6..=6 {
            for b in -6..=6 {
                let x = [0.25 * a as f64, 0.25 * b as f64];
                let kx = cross_gram(&Tensor::from_rows(&[x.to_vec()]), &z, &hyp).unwrap();
                pred.push(kx.matmul(&alpha).item());
                truth.push(0.5 * (x[0] * x[0] + x[1] * x[1]));
            }
        }
        let r = pearson(&pred, &truth);
        assert!(r > 0.9, "pearson {r}");
    }

    #[test]
    fn initial_state_layout() {
        let data = [circle(1.0, 17, 0.1, 0.0), circle(0.5, 9, 0.1, 1.0)];
        let cfg = InitConfig::new(FieldKind::Hamiltonian, 6, Bound::Shooting);
        let s = initialize(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.inducing.shape(), (6, 2));
        assert_eq!(s.whitened_mean.shape(), (6, 1));
        assert_eq!(s.states[0].len(), 4);
        assert_eq!(s.states[1].len(), 2);
        assert_eq!(s.states[0].shooting_mean.row(0), data[0].states.row(4));
        assert_eq!(s.states[1].initial_mean.data(), data[1].states.row(0));
        assert!((s.states[0].stds()[(2, 1)] - 0.1).abs() < 1e-15);
        let (_, chol) = s.whitened(0);
        assert!((chol[(3, 3)] - 0.1).abs() < 1e-15);
        assert_eq!(s.hyper().lengthscales(), vec![1.0, 1.0]);

        let g = InitConfig::new(FieldKind::Independent, 6, Bound::Standard);
        let s = initialize(&data, &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.whitened_mean.shape(), (12, 1));
        assert_eq!(s.whitened_chol.shape(), (12, 6));
        assert!(s.states.iter().all(|p| p.len() == 1));
    }
}
