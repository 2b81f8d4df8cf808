//! Single-sample Monte-Carlo estimates of the evidence lower bounds.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{Bound, ModelState};
use crate::error::{check_dim, Error, Result};
use crate::field::FieldKind;
use crate::grad::{gaussian_log_density, reparameterize, Ivp, SampleVars, Tape, Var};
use crate::kernel::{gram_chol_with_jitter, DEFAULT_JITTER};
use crate::linalg::Tensor;
use crate::odeint::{SegmentPlan, TimeGrid};
use crate::systems::Trajectory;

/// Frozen randomness for one bound evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboDraws {
    /// `S x n_out` standard-normal feature weights.
    pub weights: Tensor,
    /// `S x 2D` standard-normal frequency draws (scaled by the lengthscales).
    pub frequencies: Tensor,
    pub phases: Vec<f64>,
    /// `(n_out · M) x 1` standard-normal draws for `q(v)`.
    pub inducing: Tensor,
    /// Per trajectory, `L x 2D` standard-normal draws for the states.
    pub states: Vec<Tensor>,
}

impl ElboDraws {
    pub fn sample<R: Rng + ?Sized>(state: &ModelState, rng: &mut R) -> Self {
        let mut normal = |r: usize, c: usize| {
            Tensor::from_vec(
                r,
                c,
                (0..r * c).map(|_| StandardNormal.sample(rng)).collect(),
            )
        };
        let (s, dim, n_out, m) = (
            state.basis_count,
            state.dim(),
            state.outputs(),
            state.inducing_count(),
        );
        let weights = normal(s, n_out);
        let frequencies = normal(s, dim);
        let inducing = normal(n_out * m, 1);
        let states = state.states.iter().map(|p| normal(p.len(), dim)).collect();
        let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let phases = (0..s).map(|_| phase.sample(rng)).collect();
        ElboDraws {
            weights,
            frequencies,
            phases,
            inducing,
            states,
        }
    }
}

/// Value of the bound and of each of its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    /// Expected observation log-likelihood (after any scaling).
    pub likelihood: f64,
    /// State tolerance prior between segments.
    pub tolerance: f64,
    /// Energy tolerance prior between segments.
    pub energy: f64,
    /// Entropy of the non-initial shooting states.
    pub entropy: f64,
    /// `Σ KL[q(s₀) ‖ N(0, I)]`.
    pub kl_states: f64,
    /// `KL[q(u) ‖ p(u)]`.
    pub kl_inducing: f64,
}

#[derive(Clone, Debug)]
pub struct BoundOptions {
    pub bound: Bound,
    /// RK4 step is the smallest observation spacing divided by this.
    pub step_divisor: f64,
    /// Multiplier on the likelihood term (minibatch rescaling).
    pub likelihood_scale: f64,
    /// Known initial states, one per trajectory. When set, state posteriors
    /// are not used and the bound has no state terms.
    pub fixed_initial: Option<Vec<Vec<f64>>>,
}

impl BoundOptions {
    pub fn new(bound: Bound) -> Self {
        BoundOptions {
            bound,
            step_divisor: 10.0,
            likelihood_scale: 1.0,
            fixed_initial: None,
        }
    }
}

pub(crate) struct Leaves {
    pub all: Vec<Var>,
    whitened_mean: Var,
    whitened_chol: Var,
    inducing: Var,
    log_ls: Var,
    log_sv: Var,
    log_obs: Var,
    states: Vec<[Var; 4]>,
}

pub(crate) fn register(tape: &mut Tape, state: &ModelState) -> Leaves {
    let all: Vec<Var> = state
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let states = all[6..]
        .chunks(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    Leaves {
        whitened_mean: all[0],
        whitened_chol: all[1],
        inducing: all[2],
        log_ls: all[3],
        log_sv: all[4],
        log_obs: all[5],
        states,
        all,
    }
}

/// Nodes of the decoupled posterior sample defined by `draws`, plus the
/// per-output whitened factors (reused by the KL term).
pub(crate) fn field_nodes(
    tape: &mut Tape,
    state: &ModelState,
    leaves: &Leaves,
    draws: &ElboDraws,
) -> Result<(SampleVars, Vec<(Var, Var, Var)>)> {
    let (s, n_out, m) = (state.basis_count, state.outputs(), state.inducing_count());
    check_dim("feature weight draws", s, draws.weights.rows())?;
    check_dim("feature weight outputs", n_out, draws.weights.cols())?;
    check_dim("inducing draws", n_out * m, draws.inducing.rows())?;
    let (_, jitter) = gram_chol_with_jitter(&state.inducing, &state.hyper(), DEFAULT_JITTER)?;

    let ls = tape.exp(leaves.log_ls);
    let sv = tape.exp(leaves.log_sv);
    let k = tape.gram(leaves.inducing, ls, sv, jitter);
    let lk = tape.cholesky(k)?;

    let amp_sq = tape.scale(sv, 2.0 / s as f64);
    let amp = tape.sqrt(amp_sq);
    let w = tape.constant(draws.weights.clone());
    let weights = tape.mul_scalar(w, amp);
    let eps = tape.constant(draws.frequencies.clone());
    let alpha = tape.div_cols(eps, ls);
    let phases = Arc::new(draws.phases.clone());
    let zero = tape.constant(Tensor::zeros(m, n_out));
    let prior_part = SampleVars {
        params: [weights, alpha, zero, leaves.inducing, ls, sv],
        phases: phases.clone(),
        kind: state.kind,
    };
    let prior_at_z = tape.sample_values(leaves.inducing, &prior_part);

    let mut blocks = Vec::with_capacity(n_out);
    let mut us = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let raw = tape.slice_rows(leaves.whitened_chol, o * m, m);
        let chol = tape.positive_tril(raw);
        let mean = tape.slice_rows(leaves.whitened_mean, o * m, m);
        let e = tape.constant(Tensor::column(
            draws.inducing.data()[o * m..(o + 1) * m].to_vec(),
        ));
        let le = tape.matmul(chol, e);
        let v = tape.add(mean, le);
        us.push(tape.matmul(lk, v));
        blocks.push((raw, chol, mean));
    }
    let u = if n_out == 1 {
        us[0]
    } else {
        tape.concat_cols(&us)
    };
    let resid = tape.sub(u, prior_at_z);
    let half = tape.solve_lower(lk, resid);
    let nu = tape.solve_lower_t(lk, half);
    Ok((
        SampleVars {
            params: [weights, alpha, nu, leaves.inducing, ls, sv],
            phases,
            kind: state.kind,
        },
        blocks,
    ))
}

pub(crate) struct Objective {
    pub tape: Tape,
    pub total: Var,
    pub leaves: Leaves,
    pub terms: ElboTerms,
}

fn rk4_step(data: &[Trajectory], divisor: f64) -> Result<f64> {
    let spacing = data
        .iter()
        .map(|t| TimeGrid::new(t.times.clone()).map(|g| g.min_spacing()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(divisor > 0.0) {
        return Err(Error::invalid("step divisor must be positive"));
    }
    Ok(if spacing.is_finite() {
        spacing / divisor
    } else {
        1.0
    })
}

pub(crate) fn build(
    state: &ModelState,
    data: &[Trajectory],
    draws: &ElboDraws,
    opts: &BoundOptions,
) -> Result<Objective> {
    if data.is_empty() {
        return Err(Error::invalid("bound needs at least one trajectory"));
    }
    let dim = state.dim();
    for t in data {
        check_dim("trajectory dimension", dim, t.dim())?;
    }
    match &opts.fixed_initial {
        Some(x0) => check_dim("fixed initial states", data.len(), x0.len())?,
        None => {
            check_dim("state posteriors", data.len(), state.states.len())?;
            check_dim("state draws", data.len(), draws.states.len())?;
        }
    }
    let energy = opts.bound == Bound::EnergyShooting;
    if energy && state.kind != FieldKind::Hamiltonian {
        return Err(Error::invalid(
            "the energy tolerance needs a Hamiltonian field",
        ));
    }
    let step = rk4_step(data, opts.step_divisor)?;

    let mut tape = Tape::new();
    let leaves = register(&mut tape, state);
    let (sample, blocks) = field_nodes(&mut tape, state, &leaves, draws)?;

    // state samples and the segment layout of every trajectory
    let mut starts: Vec<Var> = Vec::new();
    let mut ivps = Vec::new();
    let mut obs_rows = Vec::new();
    let mut end_rows = Vec::new();
    let mut next_state_rows = Vec::new();
    let mut kl_terms = Vec::new();
    let mut entropy_terms = Vec::new();
    let mut out_row = 0;
    let mut state_row = 0;
    for (k, traj) in data.iter().enumerate() {
        let n = traj.len();
        let (plan, s) = match &opts.fixed_initial {
            Some(x0) => {
                check_dim("fixed initial state", dim, x0[k].len())?;
                let v = tape.constant(Tensor::from_vec(1, dim, x0[k].clone()));
                (SegmentPlan::with_count(n, 1)?, v)
            }
            None => {
                let post = &state.states[k];
                check_dim("state posterior observations", n, post.plan.n_obs())?;
                let [m0, ls0, ms, lss] = leaves.states[k];
                let eps = &draws.states[k];
                check_dim("state draws", post.len(), eps.rows())?;
                let e0 = Tensor::from_vec(1, dim, eps.row(0).to_vec());
                let s0 = reparameterize(&mut tape, m0, ls0, &e0);

                // KL[q(s₀) ‖ N(0, I)] = ½ Σ (σ² + m² − 1 − 2 log σ)
                let two_ls = tape.scale(ls0, 2.0);
                let var0 = tape.exp(two_ls);
                let msq = tape.square(m0);
                let a = tape.add(var0, msq);
                let a = tape.sub(a, two_ls);
                let a = tape.sum(a);
                let a = tape.add_const(a, -(dim as f64));
                kl_terms.push(tape.scale(a, 0.5));

                if opts.bound.uses_shooting() && post.len() > 1 {
                    let rest = Tensor::from_vec(post.len() - 1, dim, eps.data()[dim..].to_vec());
                    let sl = reparameterize(&mut tape, ms, lss, &rest);
                    let h = tape.sum(lss);
                    let count = ((post.len() - 1) * dim) as f64;
                    entropy_terms.push(tape.add_const(h, 0.5 * count * (1.0 + (2.0 * PI).ln())));
                    (post.plan.clone(), tape.concat_rows(&[s0, sl]))
                } else {
                    (SegmentPlan::with_count(n, 1)?, s0)
                }
            }
        };
        starts.push(s);
        for l in 0..plan.len() {
            let range = plan.segment(l);
            let mut times = traj.times[range.clone()].to_vec();
            for _ in range.clone() {
                obs_rows.push(out_row);
                out_row += 1;
            }
            if l + 1 < plan.len() {
                times.push(traj.times[range.end]);
                end_rows.push(out_row);
                next_state_rows.push(state_row + l + 1);
                out_row += 1;
            }
            ivps.push(Ivp {
                t0: traj.times[range.start],
                times,
            });
        }
        state_row += plan.len();
    }

    let x0 = if starts.len() == 1 {
        starts[0]
    } else {
        tape.concat_rows(&starts)
    };
    let out = tape.rollout(x0, &sample, &ivps, step);

    let pred = tape.gather_rows(out, obs_rows);
    let mut y = Vec::new();
    for t in data {
        y.extend_from_slice(t.states.data());
    }
    let n_total: usize = data.iter().map(Trajectory::len).sum();
    let y = tape.constant(Tensor::from_vec(n_total, dim, y));
    let obs_var = tape.exp(leaves.log_obs);
    let ll = gaussian_log_density(&mut tape, y, pred, obs_var);
    let likelihood = tape.scale(ll, opts.likelihood_scale);
    let mut total = likelihood;

    let mut tolerance = None;
    let mut energy_term = None;
    if !end_rows.is_empty() {
        let ends = tape.gather_rows(out, end_rows);
        let next = tape.gather_rows(x0, next_state_rows);
        let sv = tape.scalar(state.noise.shoot_var);
        let tol = gaussian_log_density(&mut tape, next, ends, sv);
        total = tape.add(total, tol);
        tolerance = Some(tol);
        if energy {
            let h_next = tape.sample_values(next, &sample);
            let h_end = tape.sample_values(ends, &sample);
            let ev = tape.scalar(state.noise.energy_var);
            let e = gaussian_log_density(&mut tape, h_next, h_end, ev);
            total = tape.add(total, e);
            energy_term = Some(e);
        }
    }

    let entropy = sum_terms(&mut tape, &entropy_terms);
    if let Some(h) = entropy {
        total = tape.add(total, h);
    }
    let kl_states = sum_terms(&mut tape, &kl_terms);
    if let Some(kl) = kl_states {
        total = tape.sub(total, kl);
    }

    // whitened KL per output: ½ (‖L̃‖² + ‖m̃‖² − M − 2 Σ log L̃_ii)
    let m = state.inducing_count() as f64;
    let mut kl_u_terms = Vec::with_capacity(blocks.len());
    for &(raw, chol, mean) in &blocks {
        let c2 = tape.square(chol);
        let c2 = tape.sum(c2);
        let m2 = tape.square(mean);
        let m2 = tape.sum(m2);
        let d = tape.diag(raw);
        let d = tape.sum(d);
        let d = tape.scale(d, -2.0);
        let a = tape.add(c2, m2);
        let a = tape.add(a, d);
        let a = tape.add_const(a, -m);
        kl_u_terms.push(tape.scale(a, 0.5));
    }
    let kl_u = sum_terms(&mut tape, &kl_u_terms).expect("at least one output");
    total = tape.sub(total, kl_u);

    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let terms = ElboTerms {
        total: tape.value(total).item(),
        likelihood: val(Some(likelihood)),
        tolerance: val(tolerance),
        energy: val(energy_term),
        entropy: val(entropy),
        kl_states: val(kl_states),
        kl_inducing: val(Some(kl_u)),
    };
    Ok(Objective {
        tape,
        total,
        leaves,
        terms,
    })
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    Some(rest.iter().fold(first, |acc, &t| tape.add(acc, t)))
}

/// Evaluate the bound under frozen randomness.
pub fn elbo(
    state: &ModelState,
    data: &[Trajectory],
    draws: &ElboDraws,
    opts: &BoundOptions,
) -> Result<ElboTerms> {
    Ok(build(state, data, draws, opts)?.terms)
}

/// The bound and its gradient with respect to every tensor of
/// [`ModelState::tensors`], in that order.
pub fn elbo_with_gradient(
    state: &ModelState,
    data: &[Trajectory],
    draws: &ElboDraws,
    opts: &BoundOptions,
) -> Result<(ElboTerms, Vec<Tensor>)> {
    let obj = build(state, data, draws, opts)?;
    let grads = obj.tape.backward(obj.total)?;
    let out = obj.leaves.all.iter().map(|&v| grads.wrt(v)).collect();
    Ok((obj.terms, out))
}
