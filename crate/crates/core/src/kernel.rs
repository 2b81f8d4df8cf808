//! ARD squared-exponential kernel over phase space, plus the covariances it
//! induces on the symplectic vector field.
//!
//! Points are ordered `(q_1..q_D, p_1..p_D)`. With the Poisson matrix
//! `P = [[0, I], [-I, 0]]` the field is `f = P ∇H`, so
//!
//! * `cov[H(x), f(x')] = P ∇_{x'} k(x, x')`
//! * `cov[f(x), f(x')] = P (∇_x ∇_{x'}ᵀ k) Pᵀ`
//!
//! The derivative operator of the cross-covariance acts on the coordinates of
//! the field's argument `x'`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, Tensor};

/// Relative diagonal jitter added to inducing Gram matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Number of times the jitter is doubled after a failed factorisation.
pub const JITTER_RETRIES: usize = 3;

/// Kernel hyperparameters, held in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
}

impl KernelHyper {
    pub fn new(lengthscales: &[f64], signal_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.len() % 2 != 0 {
            return Err(Error::invalid(
                "phase space needs an even, nonzero number of lengthscales",
            ));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive"));
        }
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::invalid("signal variance must be positive"));
        }
        Ok(KernelHyper {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
        })
    }

    /// Unit lengthscales and unit signal variance in `dim` phase dimensions.
    pub fn unit(dim: usize) -> Self {
        KernelHyper {
            log_lengthscales: vec![0.0; dim],
            log_signal_variance: 0.0,
        }
    }

    /// Phase-space dimension `2D`.
    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect()
    }
}

/// Raw kernel value from precomputed inverse squared lengthscales.
#[inline]
pub(crate) fn rbf(x: &[f64], x2: &[f64], inv_sq: &[f64], variance: f64) -> f64 {
    let mut r2 = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - x2[d];
        r2 += diff * diff * inv_sq[d];
    }
    variance * (-0.5 * r2).exp()
}

fn check_pair(ctx: &'static str, x: &[f64], x2: &[f64], hyp: &KernelHyper) -> Result<()> {
    check_dim(ctx, hyp.dim(), x.len())?;
    check_dim(ctx, hyp.dim(), x2.len())
}

/// `cov[H(x), H(x')]`.
pub fn energy_cov(x: &[f64], x2: &[f64], hyp: &KernelHyper) -> Result<f64> {
    check_pair("energy_cov", x, x2, hyp)?;
    Ok(rbf(
        x,
        x2,
        &hyp.inv_sq_lengthscales(),
        hyp.signal_variance(),
    ))
}

/// `cov[H(x), f(x')]`, a vector of length `2D`.
pub fn energy_field_cov(x: &[f64], x2: &[f64], hyp: &KernelHyper) -> Result<Vec<f64>> {
    check_pair("energy_field_cov", x, x2, hyp)?;
    let inv_sq = hyp.inv_sq_lengthscales();
    let k = rbf(x, x2, &inv_sq, hyp.signal_variance());
    // ∇_{x'} k = k (x - x') / ℓ²
    let grad: Vec<f64> = (0..x.len())
        .map(|d| k * (x[d] - x2[d]) * inv_sq[d])
        .collect();
    Ok(apply_poisson(&grad))
}

/// `cov[f(x), f(x')]`, a `2D x 2D` matrix.
pub fn field_cov(x: &[f64], x2: &[f64], hyp: &KernelHyper) -> Result<Tensor> {
    check_pair("field_cov", x, x2, hyp)?;
    let n = x.len();
    let inv_sq = hyp.inv_sq_lengthscales();
    let k = rbf(x, x2, &inv_sq, hyp.signal_variance());
    // ∂²k / ∂x_a ∂x'_b = k (δ_ab / ℓ_a² - r_a r_b), r = (x - x') / ℓ²
    let r: Vec<f64> = (0..n).map(|d| (x[d] - x2[d]) * inv_sq[d]).collect();
    let mut mixed = Tensor::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let delta = if a == b { inv_sq[a] } else { 0.0 };
            mixed[(a, b)] = k * (delta - r[a] * r[b]);
        }
    }
    // P G Pᵀ: entry (a, b) = s_a s_b G[π(a), π(b)] with π swapping q and p blocks.
    let half = n / 2;
    let mut out = Tensor::zeros(n, n);
    for a in 0..n {
        let (pa, sa) = poisson_index(a, half);
        for b in 0..n {
            let (pb, sb) = poisson_index(b, half);
            out[(a, b)] = sa * sb * mixed[(pa, pb)];
        }
    }
    Ok(out)
}

/// Row `a` of the Poisson matrix has a single entry: `(column, sign)`.
#[inline]
pub(crate) fn poisson_index(a: usize, half: usize) -> (usize, f64) {
    if a < half {
        (a + half, 1.0)
    } else {
        (a - half, -1.0)
    }
}

/// `P g` for a phase-space gradient `g = (g_q, g_p)`, i.e. `(g_p, -g_q)`.
pub fn apply_poisson(g: &[f64]) -> Vec<f64> {
    let half = g.len() / 2;
    let mut out = Vec::with_capacity(g.len());
    out.extend_from_slice(&g[half..]);
    out.extend(g[..half].iter().map(|v| -v));
    out
}

/// `k(A, B)` for the rows of `a` and `b`.
pub fn cross_gram(a: &Tensor, b: &Tensor, hyp: &KernelHyper) -> Result<Tensor> {
    check_dim("cross_gram", hyp.dim(), a.cols())?;
    check_dim("cross_gram", hyp.dim(), b.cols())?;
    let inv_sq = hyp.inv_sq_lengthscales();
    let var = hyp.signal_variance();
    let mut out = Tensor::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = rbf(a.row(i), b.row(j), &inv_sq, var);
        }
    }
    Ok(out)
}

/// `k(X, X) + jitter · σ_f² · I`.
pub fn gram(points: &Tensor, hyp: &KernelHyper, jitter: f64) -> Result<Tensor> {
    let mut k = cross_gram(points, points, hyp)?;
    let add = jitter * hyp.signal_variance();
    for i in 0..points.rows() {
        k[(i, i)] += add;
    }
    Ok(k)
}

/// Cholesky factor of `k(X, X) + jitter · σ_f² · I`.
///
/// On failure the jitter is doubled up to [`JITTER_RETRIES`] times. Returns
/// the factor together with the relative jitter that succeeded.
pub fn gram_chol_with_jitter(
    points: &Tensor,
    hyp: &KernelHyper,
    jitter: f64,
) -> Result<(Tensor, f64)> {
    if points.rows() == 0 {
        return Err(Error::invalid("gram_chol needs at least one point"));
    }
    if !(jitter >= 0.0) {
        return Err(Error::invalid("jitter must be non-negative"));
    }
    let mut j = jitter;
    let mut last = None;
    for _ in 0..=JITTER_RETRIES {
        match cholesky(&gram(points, hyp, j)?) {
            Ok(l) => return Ok((l, j)),
            Err(Error::NotPositiveDefinite { pivot, value, .. }) => {
                last = Some(Error::NotPositiveDefinite {
                    pivot,
                    value,
                    jitter: j,
                });
                if j == 0.0 {
                    break;
                }
                j *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn gram_chol(points: &Tensor, hyp: &KernelHyper, jitter: f64) -> Result<Tensor> {
    gram_chol_with_jitter(points, hyp, jitter).map(|(l, _)| l)
}

/// Random Fourier frequencies and phases for the squared-exponential kernel.
///
/// Frequencies are stored through their standard-normal draws so that they
/// can be re-derived (and differentiated) when the lengthscales change:
/// `α_{i,d} = ε_{i,d} / ℓ_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralFrequencies {
    /// `S x 2D` standard-normal draws.
    pub standard: Tensor,
    /// `S x 2D` frequencies `α`.
    pub frequencies: Tensor,
    /// `S` phases in `[0, 2π)`.
    pub phases: Vec<f64>,
}

impl SpectralFrequencies {
    pub fn from_standard(standard: Tensor, phases: Vec<f64>, hyp: &KernelHyper) -> Self {
        let ls = hyp.lengthscales();
        let mut frequencies = standard.clone();
        for i in 0..frequencies.rows() {
            for (v, l) in frequencies.row_mut(i).iter_mut().zip(&ls) {
                *v /= l;
            }
        }
        SpectralFrequencies {
            standard,
            frequencies,
            phases,
        }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

pub fn sample_spectral<R: Rng + ?Sized>(
    hyp: &KernelHyper,
    count: usize,
    rng: &mut R,
) -> Result<SpectralFrequencies> {
    if count == 0 {
        return Err(Error::invalid("need at least one Fourier basis"));
    }
    let dim = hyp.dim();
    let standard = Tensor::from_vec(
        count,
        dim,
        (0..count * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    );
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let phases = (0..count).map(|_| phase.sample(rng)).collect();
    Ok(SpectralFrequencies::from_standard(standard, phases, hyp))
}
