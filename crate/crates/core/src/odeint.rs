//! Fixed-step RK4 and adaptive Dormand–Prince 5(4) integration of
//! autonomous vector fields, over whole trajectories or independent shooting
//! segments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// An autonomous vector field `ẋ = f(x)` on phase space.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Strictly increasing, finite observation times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("time grid must be nonempty"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid must be finite"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        Ok(TimeGrid { times })
    }

    /// `count` points starting at `start`, spaced `1 / rate` apart.
    pub fn uniform(start: f64, rate: f64, count: usize) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        TimeGrid::new((0..count).map(|i| start + i as f64 / rate).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    /// Smallest gap between consecutive times (the span for a single point).
    pub fn min_spacing(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Split of an observation grid into shooting segments.
///
/// Shooting state `l` sits at observation `starts[l]` and covers observations
/// `starts[l]..starts[l + 1]`. The state after the last boundary covers the
/// rest of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    starts: Vec<usize>,
    n_obs: usize,
}

impl SegmentPlan {
    /// `count` shooting states spread evenly over `n_obs` observations.
    pub fn with_count(n_obs: usize, count: usize) -> Result<Self> {
        if n_obs == 0 {
            return Err(Error::invalid("segment plan needs observations"));
        }
        if count == 0 || count > n_obs {
            return Err(Error::invalid(format!(
                "shooting state count {count} must lie in 1..={n_obs}"
            )));
        }
        let starts = (0..count).map(|l| l * n_obs / count).collect();
        Ok(SegmentPlan { starts, n_obs })
    }

    /// One shooting state per `per_state` observations: `max(1, ⌊N / per_state⌋)`.
    pub fn every(n_obs: usize, per_state: usize) -> Result<Self> {
        let per = per_state.max(1);
        SegmentPlan::with_count(n_obs, (n_obs / per).max(1))
    }

    pub fn from_starts(starts: Vec<usize>, n_obs: usize) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(Error::invalid(
                "first shooting state must sit at observation 0",
            ));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) || *starts.last().unwrap() >= n_obs {
            return Err(Error::invalid(
                "shooting starts must increase within the grid",
            ));
        }
        Ok(SegmentPlan { starts, n_obs })
    }

    /// Number of shooting states.
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Observation indices covered by segment `l`.
    pub fn segment(&self, l: usize) -> std::ops::Range<usize> {
        let end = self.starts.get(l + 1).copied().unwrap_or(self.n_obs);
        self.starts[l]..end
    }

    /// Index of the last shooting state at or before observation `i`.
    pub fn obs_map(&self, i: usize) -> usize {
        match self.starts.binary_search(&i) {
            Ok(l) => l,
            Err(l) => l - 1,
        }
    }

    pub fn boundary_times(&self, grid: &TimeGrid) -> Vec<f64> {
        self.starts.iter().map(|&s| grid.times()[s]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SolverSpec {
    Rk4 { step: f64 },
    Dopri5 { rtol: f64, atol: f64 },
}

impl SolverSpec {
    pub fn rk4(step: f64) -> Self {
        SolverSpec::Rk4 { step }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverSpec::Dopri5 { rtol, atol }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SolverSpec::Rk4 { step } if !(step > 0.0) => {
                Err(Error::invalid("rk4 step must be positive"))
            }
            SolverSpec::Dopri5 { rtol, atol } if !(rtol > 0.0) || !(atol > 0.0) => {
                Err(Error::invalid("dopri5 tolerances must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::dopri5(1e-6, 1e-8)
    }
}

/// Number of equal RK4 substeps (and their size) to cover `span` with steps
/// no longer than `step`.
#[inline]
pub fn rk4_substeps(span: f64, step: f64) -> (usize, f64) {
    if span <= 0.0 {
        return (0, 0.0);
    }
    let n = ((span / step) - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

/// Scratch buffers for one RK4 step.
pub(crate) struct Rk4Work {
    pub k: [Vec<f64>; 4],
    pub y: Vec<f64>,
}

impl Rk4Work {
    pub fn new(dim: usize) -> Self {
        Rk4Work {
            k: [
                vec![0.0; dim],
                vec![0.0; dim],
                vec![0.0; dim],
                vec![0.0; dim],
            ],
            y: vec![0.0; dim],
        }
    }
}

/// One classical RK4 step of size `h`, in place. If `stages` is given, the
/// four stage inputs are appended to it.
#[inline]
pub(crate) fn rk4_step<F: VectorField + ?Sized>(
    field: &F,
    x: &mut [f64],
    h: f64,
    w: &mut Rk4Work,
    mut stages: Option<&mut Vec<f64>>,
) {
    let n = x.len();
    let [k1, k2, k3, k4] = &mut w.k;
    let y = &mut w.y;
    if let Some(s) = stages.as_deref_mut() {
        s.extend_from_slice(x);
    }
    field.eval(x, k1);
    for i in 0..n {
        y[i] = x[i] + 0.5 * h * k1[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s.extend_from_slice(y);
    }
    field.eval(y, k2);
    for i in 0..n {
        y[i] = x[i] + 0.5 * h * k2[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s.extend_from_slice(y);
    }
    field.eval(y, k3);
    for i in 0..n {
        y[i] = x[i] + h * k3[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s.extend_from_slice(y);
    }
    field.eval(y, k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn integrate_rk4<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    times: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut w = Rk4Work::new(x.len());
    let mut t = t0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let (n, h) = rk4_substeps(target - t, step);
        for _ in 0..n {
            rk4_step(field, &mut x, h, &mut w, None);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t_last: t,
                segment: None,
                reason: "state became non-finite".into(),
            });
        }
        t = target;
        out.push(x.clone());
    }
    Ok(out)
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// error weights: 5th order minus embedded 4th order
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS: usize = 1_000_000;

fn integrate_dopri5<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    let mut y = vec![0.0; n];
    let mut xnew = vec![0.0; n];
    field.eval(&x, &mut k[0]);

    let span = times.last().map_or(0.0, |&e| e - t0).abs();
    let mut h = initial_step(&x, &k[0], rtol, atol, span);
    let mut steps = 0usize;
    let mut out = Vec::with_capacity(times.len());

    for &target in times {
        while t < target {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::Integration {
                    t_last: t,
                    segment: None,
                    reason: "too many steps".into(),
                });
            }
            let hit = target - t <= h * (1.0 + 1e-12);
            let hstep = if hit { target - t } else { h };
            if hstep < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integration {
                    t_last: t,
                    segment: None,
                    reason: format!("step size underflow ({hstep:e})"),
                });
            }

            for i in 0..n {
                y[i] = x[i] + hstep * A21 * k[0][i];
            }
            field.eval(&y, &mut k[1]);
            for i in 0..n {
                y[i] = x[i] + hstep * (A31 * k[0][i] + A32 * k[1][i]);
            }
            field.eval(&y, &mut k[2]);
            for i in 0..n {
                y[i] = x[i] + hstep * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
            }
            field.eval(&y, &mut k[3]);
            for i in 0..n {
                y[i] =
                    x[i] + hstep * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
            }
            field.eval(&y, &mut k[4]);
            for i in 0..n {
                y[i] = x[i]
                    + hstep
                        * (A61 * k[0][i]
                            + A62 * k[1][i]
                            + A63 * k[2][i]
                            + A64 * k[3][i]
                            + A65 * k[4][i]);
            }
            field.eval(&y, &mut k[5]);
            for i in 0..n {
                xnew[i] = x[i]
                    + hstep
                        * (B1 * k[0][i]
                            + B3 * k[2][i]
                            + B4 * k[3][i]
                            + B5 * k[4][i]
                            + B6 * k[5][i]);
            }
            field.eval(&xnew, &mut k[6]);

            let mut err = 0.0;
            for i in 0..n {
                let e = hstep
                    * (E1 * k[0][i]
                        + E3 * k[2][i]
                        + E4 * k[3][i]
                        + E5 * k[4][i]
                        + E6 * k[5][i]
                        + E7 * k[6][i]);
                let sc = atol + rtol * x[i].abs().max(xnew[i].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / n as f64).sqrt();

            if !err.is_finite() {
                h = hstep * 0.1;
                continue;
            }
            if err <= 1.0 {
                t = if hit { target } else { t + hstep };
                x.copy_from_slice(&xnew);
                k.swap(0, 6);
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                // a clipped step says nothing about how large h may grow
                if !hit || hstep >= h {
                    h = hstep * fac;
                }
            } else {
                h = hstep * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t_last: t,
                segment: None,
                reason: "state became non-finite".into(),
            });
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn initial_step(x: &[f64], f0: &[f64], rtol: f64, atol: f64, span: f64) -> f64 {
    let n = x.len() as f64;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (xi, fi) in x.iter().zip(f0) {
        let sc = atol + rtol * xi.abs();
        d0 += (xi / sc).powi(2);
        d1 += (fi / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let cap = if span > 0.0 { span } else { 1.0 };
    h.min(cap).max(1e-10)
}

/// States at `times`, starting from `x0` at time `t0`. Times must be
/// nondecreasing and not before `t0`.
pub fn integrate_from<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    times: &[f64],
    solver: &SolverSpec,
) -> Result<Vec<Vec<f64>>> {
    check_dim("integrate initial state", field.dim(), x0.len())?;
    solver.validate()?;
    if times.first().is_some_and(|&t| t < t0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("output times must be nondecreasing from t0"));
    }
    match *solver {
        SolverSpec::Rk4 { step } => integrate_rk4(field, x0, t0, times, step),
        SolverSpec::Dopri5 { rtol, atol } => integrate_dopri5(field, x0, t0, times, rtol, atol),
    }
}

/// States at every grid time, with `x0` the state at the first grid time.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    grid: &TimeGrid,
    solver: &SolverSpec,
) -> Result<Vec<Vec<f64>>> {
    integrate_from(field, x0, grid.start(), grid.times(), solver)
}

/// Result of integrating all shooting segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSolution {
    /// State at every observation time, each solved from its own segment.
    pub observations: Vec<Vec<f64>>,
    /// `x(t_{l+1}; s_l)` for every segment but the last.
    pub end_states: Vec<Vec<f64>>,
}

/// Integrate each shooting segment from its own state. Segments run on the
/// current rayon pool; results do not depend on scheduling.
pub fn integrate_segments<F: VectorField + ?Sized>(
    field: &F,
    shooting_states: &[Vec<f64>],
    plan: &SegmentPlan,
    grid: &TimeGrid,
    solver: &SolverSpec,
) -> Result<SegmentSolution> {
    check_dim("shooting states", plan.len(), shooting_states.len())?;
    check_dim("segment plan grid", grid.len(), plan.n_obs())?;
    let times = grid.times();
    let per_segment: Vec<Result<(Vec<Vec<f64>>, Option<Vec<f64>>)>> = (0..plan.len())
        .into_par_iter()
        .map(|l| {
            let range = plan.segment(l);
            let t0 = times[range.start];
            let mut targets: Vec<f64> = times[range.clone()].to_vec();
            let has_end = l + 1 < plan.len();
            if has_end {
                targets.push(times[range.end]);
            }
            let mut states = integrate_from(field, &shooting_states[l], t0, &targets, solver)
                .map_err(|e| e.in_segment(l))?;
            let end = if has_end { states.pop() } else { None };
            Ok((states, end))
        })
        .collect();
    let mut observations = Vec::with_capacity(grid.len());
    let mut end_states = Vec::with_capacity(plan.len().saturating_sub(1));
    for seg in per_segment {
        let (obs, end) = seg?;
        observations.extend(obs);
        end_states.extend(end);
    }
    Ok(SegmentSolution {
        observations,
        end_states,
    })
}
