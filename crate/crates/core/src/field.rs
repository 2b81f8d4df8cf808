//! Decoupled (pathwise) function samples and the vector fields built on them.
//!
//! A sample is a deterministic function
//!
//! ```text
//! g(x) = Σ_i W_i cos(α_i·x + β_i) + Σ_j ν_j k(x, z_j)
//! ```
//!
//! where the first sum is a random-feature prior draw and the second a
//! kernel-basis correction that pins the sample to an inducing draw `u`.
//! A Hamiltonian field uses a scalar sample and `f = P ∇g`; the independent
//! field (the non-Hamiltonian baseline) uses one output per phase dimension
//! and `f = g`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{self, gram_chol, poisson_index, KernelHyper, SpectralFrequencies};
use crate::linalg::{dot, solve_lower, solve_lower_t, Tensor};
use crate::odeint::VectorField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// `f = P ∇H` for a scalar energy sample `H`.
    Hamiltonian,
    /// `f_d = g_d` with one independent sample per phase dimension.
    Independent,
}

impl FieldKind {
    /// Number of sample outputs the field needs in `dim` phase dimensions.
    pub fn outputs(self, dim: usize) -> usize {
        match self {
            FieldKind::Hamiltonian => 1,
            FieldKind::Independent => dim,
        }
    }
}

/// Index of each differentiable tensor of a [`DecoupledSample`] in
/// [`SampleGrads`].
pub mod slot {
    pub const FEATURE_WEIGHTS: usize = 0;
    pub const FREQUENCIES: usize = 1;
    pub const COEFFICIENTS: usize = 2;
    pub const INDUCING: usize = 3;
    pub const LENGTHSCALES: usize = 4;
    pub const SIGNAL_VARIANCE: usize = 5;
    pub const COUNT: usize = 6;
}

/// Gradients with respect to the six tensors of a decoupled sample, in
/// [`slot`] order.
pub type SampleGrads = Vec<Tensor>;

#[derive(Clone, Debug)]
pub struct DecoupledSample {
    /// `S x n_out`, feature amplitude folded in.
    pub feature_weights: Tensor,
    /// `S x 2D`.
    pub frequencies: Tensor,
    pub phases: Vec<f64>,
    /// `M x n_out`.
    pub coefficients: Tensor,
    /// `M x 2D`.
    pub inducing: Tensor,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    inv_sq: Vec<f64>,
}

impl DecoupledSample {
    pub fn new(
        feature_weights: Tensor,
        frequencies: Tensor,
        phases: Vec<f64>,
        coefficients: Tensor,
        inducing: Tensor,
        lengthscales: Vec<f64>,
        signal_variance: f64,
    ) -> Result<Self> {
        let dim = lengthscales.len();
        check_dim("sample frequencies", dim, frequencies.cols())?;
        check_dim("sample inducing inputs", dim, inducing.cols())?;
        check_dim("sample phases", frequencies.rows(), phases.len())?;
        check_dim(
            "sample feature weights",
            frequencies.rows(),
            feature_weights.rows(),
        )?;
        check_dim("sample coefficients", inducing.rows(), coefficients.rows())?;
        check_dim(
            "sample outputs",
            feature_weights.cols(),
            coefficients.cols(),
        )?;
        let inv_sq = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Ok(DecoupledSample {
            feature_weights,
            frequencies,
            phases,
            coefficients,
            inducing,
            lengthscales,
            signal_variance,
            inv_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn outputs(&self) -> usize {
        self.feature_weights.cols()
    }

    pub fn zero_grads(&self) -> SampleGrads {
        vec![
            Tensor::zeros(self.feature_weights.rows(), self.feature_weights.cols()),
            Tensor::zeros(self.frequencies.rows(), self.frequencies.cols()),
            Tensor::zeros(self.coefficients.rows(), self.coefficients.cols()),
            Tensor::zeros(self.inducing.rows(), self.inducing.cols()),
            Tensor::zeros(self.dim(), 1),
            Tensor::zeros(1, 1),
        ]
    }

    /// Sample value at `x`, written to `out` (length `n_out`).
    pub fn value(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let n_out = self.outputs();
        for i in 0..self.phases.len() {
            let c = (self.phases[i] + dot(self.frequencies.row(i), x)).cos();
            let w = self.feature_weights.row(i);
            for o in 0..n_out {
                out[o] += w[o] * c;
            }
        }
        for j in 0..self.inducing.rows() {
            let k = kernel::rbf(x, self.inducing.row(j), &self.inv_sq, self.signal_variance);
            let nu = self.coefficients.row(j);
            for o in 0..n_out {
                out[o] += nu[o] * k;
            }
        }
    }

    /// Gradient of output 0 at `x`, written to `grad` (length `2D`).
    pub fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let dim = x.len();
        for i in 0..self.phases.len() {
            let s = (self.phases[i] + dot(self.frequencies.row(i), x)).sin();
            let ws = self.feature_weights[(i, 0)] * s;
            let alpha = self.frequencies.row(i);
            for d in 0..dim {
                grad[d] -= ws * alpha[d];
            }
        }
        for j in 0..self.inducing.rows() {
            let z = self.inducing.row(j);
            let k = kernel::rbf(x, z, &self.inv_sq, self.signal_variance);
            let nk = self.coefficients[(j, 0)] * k;
            for d in 0..dim {
                grad[d] -= nk * (x[d] - z[d]) * self.inv_sq[d];
            }
        }
    }

    /// Reverse-mode product for `v · g(x)`: accumulates into `gx` and `grads`.
    pub fn vjp_value(&self, x: &[f64], v: &[f64], gx: &mut [f64], grads: &mut SampleGrads) {
        let dim = x.len();
        let n_out = self.outputs();
        let [gw, ga, gnu, gz, gl, gs] = grads_mut(grads);
        for i in 0..self.phases.len() {
            let alpha = self.frequencies.row(i);
            let (s, c) = (self.phases[i] + dot(alpha, x)).sin_cos();
            let w = self.feature_weights.row(i);
            let mut wv = 0.0;
            let gwr = gw.row_mut(i);
            for o in 0..n_out {
                wv += w[o] * v[o];
                gwr[o] += v[o] * c;
            }
            let ws = wv * s;
            let gar = ga.row_mut(i);
            for d in 0..dim {
                gar[d] -= ws * x[d];
                gx[d] -= ws * alpha[d];
            }
        }
        let var = self.signal_variance;
        let mut gvar = 0.0;
        for j in 0..self.inducing.rows() {
            let z = self.inducing.row(j);
            let k = kernel::rbf(x, z, &self.inv_sq, var);
            let nu = self.coefficients.row(j);
            let mut nv = 0.0;
            let gnur = gnu.row_mut(j);
            for o in 0..n_out {
                nv += nu[o] * v[o];
                gnur[o] += v[o] * k;
            }
            let nk = nv * k;
            gvar += nk / var;
            let gzr = gz.row_mut(j);
            for d in 0..dim {
                let r = (x[d] - z[d]) * self.inv_sq[d];
                gx[d] -= nk * r;
                gzr[d] += nk * r;
                gl.data_mut()[d] += nk * r * (x[d] - z[d]) / self.lengthscales[d];
            }
        }
        gs.data_mut()[0] += gvar;
    }

    /// Reverse-mode product for `v · P ∇g(x)` (output 0).
    pub fn vjp_symplectic(&self, x: &[f64], v: &[f64], gx: &mut [f64], grads: &mut SampleGrads) {
        let dim = x.len();
        let half = dim / 2;
        // c = Pᵀ v so that v · P g = c · g
        let mut cvec = [0.0f64; 16];
        let c = if dim <= 16 {
            &mut cvec[..dim]
        } else {
            unreachable!("phase dimension above 16 is not supported")
        };
        for (a, &va) in v.iter().enumerate() {
            let (col, sign) = poisson_index(a, half);
            c[col] = sign * va;
        }
        let [gw, ga, gnu, gz, gl, gs] = grads_mut(grads);
        for i in 0..self.phases.len() {
            let alpha = self.frequencies.row(i);
            let (s, co) = (self.phases[i] + dot(alpha, x)).sin_cos();
            let w = self.feature_weights[(i, 0)];
            let a_dot_c = dot(alpha, c);
            gw.data_mut()[i] -= s * a_dot_c;
            let gar = ga.row_mut(i);
            let wca = w * co * a_dot_c;
            for d in 0..dim {
                gar[d] -= wca * x[d] + w * s * c[d];
                gx[d] -= wca * alpha[d];
            }
        }
        let var = self.signal_variance;
        let mut gvar = 0.0;
        for j in 0..self.inducing.rows() {
            let z = self.inducing.row(j);
            let k = kernel::rbf(x, z, &self.inv_sq, var);
            let mut b = 0.0;
            for d in 0..dim {
                b += c[d] * (x[d] - z[d]) * self.inv_sq[d];
            }
            let nu = self.coefficients[(j, 0)];
            gnu.data_mut()[j] -= k * b;
            gvar -= nu * k * b / var;
            let nk = nu * k;
            let gzr = gz.row_mut(j);
            for d in 0..dim {
                let delta = x[d] - z[d];
                let t = nk * (delta * b - c[d]) * self.inv_sq[d];
                gx[d] += t;
                gzr[d] -= t;
                gl.data_mut()[d] -= nk * (delta * delta * b - 2.0 * c[d] * delta) * self.inv_sq[d]
                    / self.lengthscales[d];
            }
        }
        gs.data_mut()[0] += gvar;
    }
}

fn grads_mut(grads: &mut SampleGrads) -> [&mut Tensor; 6] {
    let [a, b, c, d, e, f] = grads.as_mut_slice() else {
        panic!("sample gradients must have {} slots", slot::COUNT)
    };
    [a, b, c, d, e, f]
}

/// A vector field built from a decoupled sample.
#[derive(Clone, Debug)]
pub struct SampledField {
    pub sample: DecoupledSample,
    pub kind: FieldKind,
}

impl SampledField {
    pub fn new(sample: DecoupledSample, kind: FieldKind) -> Result<Self> {
        check_dim(
            "field outputs",
            kind.outputs(sample.dim()),
            sample.outputs(),
        )?;
        Ok(SampledField { sample, kind })
    }

    /// Accumulate the reverse-mode product `v · ∂f(x)` into `gx` and `grads`.
    pub fn vjp(&self, x: &[f64], v: &[f64], gx: &mut [f64], grads: &mut SampleGrads) {
        match self.kind {
            FieldKind::Hamiltonian => self.sample.vjp_symplectic(x, v, gx, grads),
            FieldKind::Independent => self.sample.vjp_value(x, v, gx, grads),
        }
    }
}

impl VectorField for SampledField {
    fn dim(&self) -> usize {
        self.sample.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            FieldKind::Hamiltonian => {
                let mut g = [0.0f64; 16];
                let g = &mut g[..x.len()];
                self.sample.gradient(x, g);
                let half = x.len() / 2;
                for a in 0..x.len() {
                    let (col, sign) = poisson_index(a, half);
                    out[a] = sign * g[col];
                }
            }
            FieldKind::Independent => self.sample.value(x, out),
        }
    }
}

/// Random-feature amplitude `sqrt(2 σ_f² / S)` for the squared-exponential kernel.
pub fn feature_amplitude(signal_variance: f64, count: usize) -> f64 {
    (2.0 * signal_variance / count as f64).sqrt()
}

/// Inducing inputs with a whitened Gaussian over the inducing energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    /// `M x 2D`.
    pub inducing: Tensor,
    pub whitened_mean: Vec<f64>,
    /// `M x M` lower-triangular with positive diagonal.
    pub whitened_chol: Tensor,
}

impl InducingSet {
    pub fn new(inducing: Tensor, whitened_mean: Vec<f64>, whitened_chol: Tensor) -> Result<Self> {
        let m = inducing.rows();
        if m == 0 {
            return Err(Error::invalid("need at least one inducing point"));
        }
        check_dim("whitened mean", m, whitened_mean.len())?;
        check_dim("whitened chol rows", m, whitened_chol.rows())?;
        check_dim("whitened chol cols", m, whitened_chol.cols())?;
        if (0..m).any(|i| !(whitened_chol[(i, i)] > 0.0)) {
            return Err(Error::invalid("whitened chol needs a positive diagonal"));
        }
        Ok(InducingSet {
            inducing,
            whitened_mean,
            whitened_chol: whitened_chol.lower(),
        })
    }

    /// A (numerically) degenerate `q(u)` concentrated at `u`.
    pub fn point_mass(inducing: Tensor, u: &[f64], hyp: &KernelHyper) -> Result<Self> {
        let lk = gram_chol(&inducing, hyp, kernel::DEFAULT_JITTER)?;
        let mean = solve_lower(&lk, &Tensor::column(u.to_vec())).into_vec();
        let m = inducing.rows();
        let mut chol = Tensor::zeros(m, m);
        for i in 0..m {
            chol[(i, i)] = 1e-12;
        }
        InducingSet::new(inducing, mean, chol)
    }

    pub fn len(&self) -> usize {
        self.inducing.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inducing.rows() == 0
    }

    /// Unwhitened `(m, Q)` with `m = L_K m̃` and `Q = L_K Q̃ L_Kᵀ`.
    pub fn unwhitened(&self, hyp: &KernelHyper) -> Result<(Vec<f64>, Tensor)> {
        let lk = gram_chol(&self.inducing, hyp, kernel::DEFAULT_JITTER)?;
        let mean = lk
            .matmul(&Tensor::column(self.whitened_mean.clone()))
            .into_vec();
        let a = lk.matmul(&self.whitened_chol);
        Ok((mean, a.matmul_t(&a)))
    }
}

/// One Hamiltonian function sample.
#[derive(Clone, Debug)]
pub struct PathSample {
    /// Standard-normal Fourier weights `w`.
    pub weights: Vec<f64>,
    pub basis: SpectralFrequencies,
    /// Kernel-basis coefficients `ν`.
    pub coefficients: Vec<f64>,
    /// Inducing energies the sample interpolates.
    pub u_draw: Vec<f64>,
    pub hyp: KernelHyper,
    pub inducing: Tensor,
    field: SampledField,
}

impl PathSample {
    /// Build the sample that passes through `u_draw` at the inducing inputs.
    pub fn through(
        weights: Vec<f64>,
        basis: SpectralFrequencies,
        u_draw: Vec<f64>,
        hyp: KernelHyper,
        inducing: Tensor,
    ) -> Result<Self> {
        check_dim("path inducing energies", inducing.rows(), u_draw.len())?;
        check_dim("path weights", basis.len(), weights.len())?;
        let lk = gram_chol(&inducing, &hyp, kernel::DEFAULT_JITTER)?;
        let amp = feature_amplitude(hyp.signal_variance(), basis.len());
        let mut resid = u_draw.clone();
        for (m, r) in resid.iter_mut().enumerate() {
            let z = inducing.row(m);
            for i in 0..basis.len() {
                let theta = basis.phases[i] + dot(basis.frequencies.row(i), z);
                *r -= amp * weights[i] * theta.cos();
            }
        }
        let nu = solve_lower_t(&lk, &solve_lower(&lk, &Tensor::column(resid))).into_vec();
        PathSample::from_parts(weights, basis, nu, u_draw, hyp, inducing)
    }

    /// Assemble a sample from explicit coefficients.
    pub fn from_parts(
        weights: Vec<f64>,
        basis: SpectralFrequencies,
        coefficients: Vec<f64>,
        u_draw: Vec<f64>,
        hyp: KernelHyper,
        inducing: Tensor,
    ) -> Result<Self> {
        let amp = feature_amplitude(hyp.signal_variance(), basis.len());
        let sample = DecoupledSample::new(
            Tensor::column(weights.iter().map(|w| amp * w).collect()),
            basis.frequencies.clone(),
            basis.phases.clone(),
            Tensor::column(coefficients.clone()),
            inducing.clone(),
            hyp.lengthscales(),
            hyp.signal_variance(),
        )?;
        Ok(PathSample {
            weights,
            basis,
            coefficients,
            u_draw,
            hyp,
            inducing,
            field: SampledField {
                sample,
                kind: FieldKind::Hamiltonian,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.hyp.dim()
    }

    pub fn field(&self) -> &SampledField {
        &self.field
    }

    pub fn eval_h(&self, x: &[f64]) -> Result<f64> {
        check_dim("eval_h", self.dim(), x.len())?;
        let mut out = [0.0];
        self.field.sample.value(x, &mut out);
        Ok(out[0])
    }

    pub fn grad_h(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("grad_h", self.dim(), x.len())?;
        let mut g = vec![0.0; x.len()];
        self.field.sample.gradient(x, &mut g);
        Ok(g)
    }

    pub fn vector_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("vector_field", self.dim(), x.len())?;
        let mut f = vec![0.0; x.len()];
        self.field.eval(x, &mut f);
        Ok(f)
    }
}

/// Draw a Hamiltonian sample: prior Fourier part, `u ~ q(u)`, and `ν`.
pub fn draw_path<R: Rng + ?Sized>(
    ind: &InducingSet,
    hyp: &KernelHyper,
    count: usize,
    rng: &mut R,
) -> Result<PathSample> {
    check_dim("draw_path inducing inputs", hyp.dim(), ind.inducing.cols())?;
    let basis = kernel::sample_spectral(hyp, count, rng)?;
    let weights: Vec<f64> = (0..count).map(|_| StandardNormal.sample(rng)).collect();
    let m = ind.len();
    let eps = Tensor::column((0..m).map(|_| StandardNormal.sample(rng)).collect());
    let mut whitened = ind.whitened_chol.matmul(&eps).into_vec();
    for (w, mu) in whitened.iter_mut().zip(&ind.whitened_mean) {
        *w += mu;
    }
    let lk = gram_chol(&ind.inducing, hyp, kernel::DEFAULT_JITTER)?;
    let u = lk.matmul(&Tensor::column(whitened)).into_vec();
    PathSample::through(weights, basis, u, hyp.clone(), ind.inducing.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::cross_gram;
    use crate::linalg::cholesky_solve;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sample(rng: &mut ChaCha8Rng, dim: usize, kind: FieldKind) -> SampledField {
        let s = 12;
        let m = 5;
        let n_out = kind.outputs(dim);
        let r = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let sample = DecoupledSample::new(
            Tensor::from_vec(s, n_out, r(rng, s * n_out)),
            Tensor::from_vec(s, dim, r(rng, s * dim)).scale(2.0),
            r(rng, s).iter().map(|v| (v + 1.0) * 3.0).collect(),
            Tensor::from_vec(m, n_out, r(rng, m * n_out)),
            Tensor::from_vec(m, dim, r(rng, m * dim)),
            (0..dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        SampledField::new(sample, kind).unwrap()
    }

    fn random_path(rng: &mut ChaCha8Rng, dim: usize) -> PathSample {
        let hyp = KernelHyper::new(
            &(0..dim)
                .map(|_| rng.random_range(0.5..1.5))
                .collect::<Vec<_>>(),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        let z = Tensor::from_vec(
            6,
            dim,
            (0..6 * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut chol = Tensor::identity(6).scale(0.3);
        chol[(3, 1)] = 0.1;
        let ind = InducingSet::new(
            z,
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            chol,
        )
        .unwrap();
        draw_path(&ind, &hyp, 32, rng).unwrap()
    }

    #[test]
    fn zero_sample_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_path(&mut rng, 2);
        p = PathSample::from_parts(
            vec![0.0; p.weights.len()],
            p.basis.clone(),
            vec![0.0; p.coefficients.len()],
            p.u_draw.clone(),
            p.hyp.clone(),
            p.inducing.clone(),
        )
        .unwrap();
        assert_eq!(p.eval_h(&[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(p.grad_h(&[0.3, 0.1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.vector_field(&[0.3, 0.1]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_cosine_basis() {
        // σ_f² = 0.5 with one basis gives unit feature amplitude.
        let hyp = KernelHyper::new(&[1.0, 1.0], 0.5).unwrap();
        let basis = SpectralFrequencies {
            standard: Tensor::zeros(1, 2),
            frequencies: Tensor::zeros(1, 2),
            phases: vec![0.0],
        };
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let p = PathSample::from_parts(vec![1.0], basis, vec![0.0], vec![1.0], hyp, z).unwrap();
        for x in [[0.0, 0.0], [3.0, -2.0], [-0.5, 10.0]] {
            assert!((p.eval_h(&x).unwrap() - 1.0).abs() < 1e-15);
            assert_eq!(p.grad_h(&x).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn eval_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_path(&mut rng, 4);
        let x = [0.2, -0.4, 0.9, 0.1];
        let amp = (2.0 * p.hyp.signal_variance() / p.weights.len() as f64).sqrt();
        let mut expect = 0.0;
        for i in 0..p.weights.len() {
            let mut th = p.basis.phases[i];
            for d in 0..4 {
                th += p.basis.frequencies[(i, d)] * x[d];
            }
            expect += amp * p.weights[i] * th.cos();
        }
        for j in 0..p.coefficients.len() {
            expect +=
                p.coefficients[j] * kernel::energy_cov(&x, p.inducing.row(j), &p.hyp).unwrap();
        }
        assert!((p.eval_h(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_path(&mut rng, 4);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = p.grad_h(&x).unwrap();
            let h = 1e-6;
            let scale = g.iter().map(|v| v.abs()).fold(1e-8, f64::max);
            for d in 0..4 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[d] += h;
                b[d] -= h;
                let fd = (p.eval_h(&a).unwrap() - p.eval_h(&b).unwrap()) / (2.0 * h);
                assert!((fd - g[d]).abs() / scale < 1e-5, "{fd} vs {}", g[d]);
            }
        }
    }

    #[test]
    fn conservation_and_swap_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [2, 4] {
            let p = random_path(&mut rng, dim);
            for _ in 0..20 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let g = p.grad_h(&x).unwrap();
                let f = p.vector_field(&x).unwrap();
                let inner: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
                let scale: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt()
                    * g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(inner.abs() <= 1e-12 * (scale + 1.0));
                if dim == 2 {
                    assert_eq!(f, vec![g[1], -g[0]]);
                }
            }
        }
    }

    #[test]
    fn divergence_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_path(&mut rng, 4);
        let h = 1e-5;
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut div = 0.0;
            for d in 0..4 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[d] += h;
                b[d] -= h;
                div +=
                    (p.vector_field(&a).unwrap()[d] - p.vector_field(&b).unwrap()[d]) / (2.0 * h);
            }
            assert!(div.abs() <= 1e-4, "divergence {div}");
        }
    }

    #[test]
    fn interpolates_inducing_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hyp = KernelHyper::new(&[0.8, 1.2], 1.0).unwrap();
        let z = Tensor::from_rows(&[
            vec![-1.0, 0.0],
            vec![0.0, 0.5],
            vec![1.0, -0.5],
            vec![0.3, 1.0],
        ]);
        let u_star = [0.5, -0.2, 1.1, 0.0];
        let ind = InducingSet::point_mass(z.clone(), &u_star, &hyp).unwrap();
        let p = draw_path(&ind, &hyp, 1024, &mut rng).unwrap();
        for (m, u) in u_star.iter().enumerate() {
            let v = p.eval_h(z.row(m)).unwrap();
            assert!((v - u).abs() < 1e-3, "{v} vs {u}");
        }
    }

    #[test]
    fn seeded_draws_are_identical() {
        let a = random_path(&mut ChaCha8Rng::seed_from_u64(7), 2);
        let b = random_path(&mut ChaCha8Rng::seed_from_u64(7), 2);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.basis, b.basis);
    }

    #[test]
    fn monte_carlo_mean_matches_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hyp = KernelHyper::new(&[0.9, 1.1], 1.3).unwrap();
        let z = Tensor::from_rows(&[vec![-1.0, 0.2], vec![0.0, -0.4], vec![0.8, 0.6]]);
        let mut chol = Tensor::identity(3).scale(0.4);
        chol[(2, 0)] = 0.2;
        let ind = InducingSet::new(z.clone(), vec![0.5, -1.0, 0.7], chol).unwrap();
        let (m, _) = ind.unwhitened(&hyp).unwrap();
        let xs = Tensor::from_rows(&[vec![0.1, 0.1], vec![-0.5, 0.9]]);
        let lk = gram_chol(&z, &hyp, kernel::DEFAULT_JITTER).unwrap();
        let kxz = cross_gram(&xs, &z, &hyp).unwrap();
        let mean = kxz.matmul(&cholesky_solve(&lk, &Tensor::column(m)));
        let n = 2000;
        let mut vals = vec![Vec::with_capacity(n); 2];
        for _ in 0..n {
            let p = draw_path(&ind, &hyp, 256, &mut rng).unwrap();
            for (i, v) in vals.iter_mut().enumerate() {
                v.push(p.eval_h(xs.row(i)).unwrap());
            }
        }
        for (i, v) in vals.iter().enumerate() {
            let mu = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((mu - mean[(i, 0)]).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn field_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [FieldKind::Hamiltonian, FieldKind::Independent] {
            for dim in [2, 4] {
                let field = random_sample(&mut rng, dim, kind);
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut gx = vec![0.0; dim];
                let mut grads = field.sample.zero_grads();
                field.vjp(&x, &v, &mut gx, &mut grads);

                let objective = |f: &SampledField, x: &[f64]| -> f64 {
                    let mut out = vec![0.0; dim];
                    f.eval(x, &mut out);
                    out.iter().zip(&v).map(|(a, b)| a * b).sum()
                };
                let h = 1e-6;
                for d in 0..dim {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[d] += h;
                    b[d] -= h;
                    let fd = (objective(&field, &a) - objective(&field, &b)) / (2.0 * h);
                    assert!((fd - gx[d]).abs() < 1e-6 * (1.0 + fd.abs()), "x[{d}]");
                }
                // perturb each parameter tensor entry
                for s in 0..slot::COUNT {
                    let len = grads[s].len();
                    for e in 0..len {
                        let perturb = |delta: f64| {
                            let mut f = field.clone();
                            let smp = &mut f.sample;
                            match s {
                                slot::FEATURE_WEIGHTS => smp.feature_weights.data_mut()[e] += delta,
                                slot::FREQUENCIES => smp.frequencies.data_mut()[e] += delta,
                                slot::COEFFICIENTS => smp.coefficients.data_mut()[e] += delta,
                                slot::INDUCING => smp.inducing.data_mut()[e] += delta,
                                slot::LENGTHSCALES => smp.lengthscales[e] += delta,
                                _ => smp.signal_variance += delta,
                            }
                            let f = SampledField::new(
                                DecoupledSample::new(
                                    smp.feature_weights.clone(),
                                    smp.frequencies.clone(),
                                    smp.phases.clone(),
                                    smp.coefficients.clone(),
                                    smp.inducing.clone(),
                                    smp.lengthscales.clone(),
                                    smp.signal_variance,
                                )
                                .unwrap(),
                                kind,
                            )
                            .unwrap();
                            objective(&f, &x)
                        };
                        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                        let an = grads[s].data()[e];
                        assert!(
                            (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                            "{kind:?} dim {dim} slot {s}[{e}]: {an} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}
