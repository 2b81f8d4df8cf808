//! Reverse-mode differentiation on an explicit tape, plus the Adam optimiser.
//!
//! Every op records its value, its inputs and a pullback mapping the output
//! cotangent to input cotangents. Values are never checked eagerly; the first
//! non-finite value is reported by [`Tape::backward`] with the op's name.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DecoupledSample, FieldKind, SampleGrads, SampledField};
use crate::linalg::{cholesky, dot, solve_lower, solve_lower_t, Tensor};
use crate::odeint::{rk4_step, rk4_substeps, Rk4Work};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Pullback = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    pullback: Option<Pullback>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents of every node reached from the objective.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v` (zeros when `v` does not affect the objective).
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// The six differentiable tensors of a decoupled sample in `slot` order, plus
/// the constant phases and field kind.
#[derive(Clone, Debug)]
pub struct SampleVars {
    pub params: [Var; 6],
    pub phases: Arc<Vec<f64>>,
    pub kind: FieldKind,
}

/// One initial-value problem of a batched rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Ivp {
    pub t0: f64,
    /// Nondecreasing output times, none before `t0`.
    pub times: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push("leaf", value, vec![], None)
    }

    /// A fixed input. Gradients are still recorded but have no meaning to the caller.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, vec![], None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<usize>,
        pullback: Option<Pullback>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs,
            pullback,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Reverse sweep from the `1 x 1` objective `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        assert_eq!(self.shape(out), (1, 1), "objective must be a scalar");
        for node in &self.nodes[..=out.0] {
            if !node.value.is_finite() {
                return Err(Error::NonFinite { op: node.op });
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(pullback) = &node.pullback else {
                continue;
            };
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = &hi[0] else {
                continue;
            };
            let input_grads = pullback(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                if !ig.is_finite() {
                    return Err(Error::NonFinite { op: node.op });
                }
                match &mut lo[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Var {
        let x = self.value(a).clone();
        let y = x.map(f);
        let yc = y.clone();
        self.push(
            op,
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = g.clone();
                for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(yc.data()) {
                    *o *= df(xi, yi);
                }
                vec![out]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary("log", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary("sin", a, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary("cos", a, f64::cos, |x, _| -x.sin())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary("sqrt", a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        self.push(
            "scale",
            y,
            vec![a.0],
            Some(Box::new(move |g| vec![g.scale(c)])),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|v| v + c);
        self.push(
            "add_const",
            y,
            vec![a.0],
            Some(Box::new(|g| vec![g.clone()])),
        )
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "shape mismatch in elementwise {op}"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes("add", a, b);
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            "add",
            y,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes("sub", a, b);
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            "sub",
            y,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes("mul", a, b);
        let (x, z) = (self.value(a).clone(), self.value(b).clone());
        let y = x.zip_map(&z, |p, q| p * q);
        self.push(
            "mul",
            y,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&z, |p, q| p * q), g.zip_map(&x, |p, q| p * q)]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes("div", a, b);
        let (x, z) = (self.value(a).clone(), self.value(b).clone());
        let y = x.zip_map(&z, |p, q| p / q);
        let yc = y.clone();
        self.push(
            "div",
            y,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = g.zip_map(&z, |p, q| p / q);
                let gb = ga.zip_map(&yc, |p, q| -p * q);
                vec![ga, gb]
            })),
        )
    }

    /// Multiply every entry of `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a scalar");
        let x = self.value(a).clone();
        let sv = self.value(s).item();
        let y = x.scale(sv);
        self.push(
            "mul_scalar",
            y,
            vec![a.0, s.0],
            Some(Box::new(move |g| {
                vec![g.scale(sv), Tensor::scalar(dot(g.data(), x.data()))]
            })),
        )
    }

    /// Divide column `d` of `a` by entry `d` of the column vector `l`.
    pub fn div_cols(&mut self, a: Var, l: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(l), (cols, 1), "div_cols divisor shape");
        let x = self.value(a).clone();
        let lv = self.value(l).clone().into_vec();
        let mut y = x.clone();
        for r in 0..rows {
            for (v, d) in y.row_mut(r).iter_mut().zip(&lv) {
                *v /= d;
            }
        }
        self.push(
            "div_cols",
            y,
            vec![a.0, l.0],
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                let mut gl = Tensor::zeros(cols, 1);
                for r in 0..rows {
                    for c in 0..cols {
                        ga[(r, c)] /= lv[c];
                        gl[(c, 0)] -= g[(r, c)] * x[(r, c)] / (lv[c] * lv[c]);
                    }
                }
                vec![ga, gl]
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let y = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            y,
            vec![a.0],
            Some(Box::new(move |g| vec![Tensor::filled(r, c, g.item())])),
        )
    }

    /// Sum of elementwise products, as a `1 x 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, z) = (self.value(a).clone(), self.value(b).clone());
        let y = x.matmul(&z);
        self.push(
            "matmul",
            y,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.matmul_t(&z), x.t_matmul(g)])),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).transpose();
        self.push(
            "transpose",
            y,
            vec![a.0],
            Some(Box::new(|g| vec![g.transpose()])),
        )
    }

    /// Stack nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            sizes.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let rows = sizes.iter().sum();
        self.push(
            "concat_rows",
            Tensor::from_vec(rows, cols, data),
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let t = Tensor::from_vec(
                            n,
                            cols,
                            g.data()[start * cols..(start + n) * cols].to_vec(),
                        );
                        start += n;
                        t
                    })
                    .collect()
            })),
        )
    }

    /// Place nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let transposed: Vec<Var> = parts.iter().map(|&p| self.transpose(p)).collect();
        let stacked = self.concat_rows(&transposed);
        self.transpose(stacked)
    }

    /// Rows `idx` of `a`, in order (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (rows, cols) = self.shape(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let y = Tensor::from_vec(idx.len(), cols, data);
        self.push(
            "gather_rows",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                vec![ga]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        self.gather_rows(a, (start..start + count).collect())
    }

    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Var {
        let (rows, cols) = self.shape(a);
        let y = Tensor::scalar(self.value(a)[(r, c)]);
        self.push(
            "element",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(rows, cols);
                ga[(r, c)] = g.item();
                vec![ga]
            })),
        )
    }

    /// Diagonal of a square node as a column.
    pub fn diag(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        assert_eq!(self.shape(a), (n, n), "diag of a non-square node");
        let x = self.value(a);
        let y = Tensor::column((0..n).map(|i| x[(i, i)]).collect());
        self.push(
            "diag",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(n, n);
                for i in 0..n {
                    ga[(i, i)] = g[(i, 0)];
                }
                vec![ga]
            })),
        )
    }

    /// Lower-triangular factor with strict lower part taken from `raw` and
    /// diagonal `exp(diag(raw))`; the upper part of `raw` is ignored.
    pub fn positive_tril(&mut self, raw: Var) -> Var {
        let n = self.shape(raw).0;
        assert_eq!(
            self.shape(raw),
            (n, n),
            "positive_tril of a non-square node"
        );
        let mut y = self.value(raw).lower();
        for i in 0..n {
            y[(i, i)] = y[(i, i)].exp();
        }
        let yc = y.clone();
        self.push(
            "positive_tril",
            y,
            vec![raw.0],
            Some(Box::new(move |g| {
                let mut ga = g.lower();
                for i in 0..n {
                    ga[(i, i)] *= yc[(i, i)];
                }
                vec![ga]
            })),
        )
    }

    /// Squared-exponential Gram `σ² (E + jitter I)` over the rows of `z`, with
    /// lengthscale column `l` and `1 x 1` signal variance `var`.
    pub fn gram(&mut self, z: Var, l: Var, var: Var, jitter: f64) -> Var {
        let (n, d) = self.shape(z);
        assert_eq!(self.shape(l), (d, 1), "gram lengthscale shape");
        let zv = self.value(z).clone();
        let lv = self.value(l).clone().into_vec();
        let s2 = self.value(var).item();
        let inv_sq: Vec<f64> = lv.iter().map(|v| 1.0 / (v * v)).collect();
        let mut e = Tensor::zeros(n, n);
        for i in 0..n {
            e[(i, i)] = 1.0;
            for j in 0..i {
                let k = crate::kernel::rbf(zv.row(i), zv.row(j), &inv_sq, 1.0);
                e[(i, j)] = k;
                e[(j, i)] = k;
            }
        }
        let mut y = e.scale(s2);
        for i in 0..n {
            y[(i, i)] += s2 * jitter;
        }
        self.push(
            "gram",
            y,
            vec![z.0, l.0, var.0],
            Some(Box::new(move |g| {
                let mut gz = Tensor::zeros(n, d);
                let mut gl = Tensor::zeros(d, 1);
                let mut gv = 0.0;
                for i in 0..n {
                    gv += g[(i, i)] * (1.0 + jitter);
                    for j in 0..i {
                        let gij = g[(i, j)] + g[(j, i)];
                        let eij = e[(i, j)];
                        gv += gij * eij;
                        let k = gij * s2 * eij;
                        for c in 0..d {
                            let delta = zv[(i, c)] - zv[(j, c)];
                            let t = k * delta * inv_sq[c];
                            gz[(i, c)] -= t;
                            gz[(j, c)] += t;
                            gl[(c, 0)] += t * delta / lv[c];
                        }
                    }
                }
                vec![gz, gl, Tensor::scalar(gv)]
            })),
        )
    }

    /// Lower Cholesky factor. The input is read from its lower triangle and
    /// its cotangent is returned symmetrised.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = cholesky(self.value(a))?;
        let lc = l.clone();
        Ok(self.push(
            "cholesky",
            l,
            vec![a.0],
            Some(Box::new(move |g| {
                let n = lc.rows();
                // Φ(Lᵀ L̄): lower triangle with halved diagonal
                let mut p = lc.t_matmul(&g.lower()).lower();
                for i in 0..n {
                    p[(i, i)] *= 0.5;
                }
                // S = L⁻ᵀ P L⁻¹
                let s = solve_lower_t(&lc, &p);
                let s = solve_lower_t(&lc, &s.transpose()).transpose();
                let mut sym = s.clone();
                for i in 0..n {
                    for j in 0..n {
                        sym[(i, j)] = 0.5 * (s[(i, j)] + s[(j, i)]);
                    }
                }
                vec![sym]
            })),
        ))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let lv = self.value(l).clone();
        let x = solve_lower(&lv, self.value(b));
        let xc = x.clone();
        self.push(
            "solve_lower",
            x,
            vec![l.0, b.0],
            Some(Box::new(move |g| {
                let gb = solve_lower_t(&lv, g);
                let gl = gb.matmul_t(&xc).lower().scale(-1.0);
                vec![gl, gb]
            })),
        )
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let lv = self.value(l).clone();
        let x = solve_lower_t(&lv, self.value(b));
        let xc = x.clone();
        self.push(
            "solve_lower_t",
            x,
            vec![l.0, b.0],
            Some(Box::new(move |g| {
                let gb = solve_lower(&lv, g);
                let gl = xc.matmul_t(&gb).lower().scale(-1.0);
                vec![gl, gb]
            })),
        )
    }

    fn build_sample(&self, s: &SampleVars) -> DecoupledSample {
        let p = |i: usize| self.value(s.params[i]).clone();
        DecoupledSample::new(
            p(0),
            p(1),
            s.phases.as_ref().clone(),
            p(2),
            p(3),
            p(4).into_vec(),
            p(5).item(),
        )
        .expect("sample tensors have consistent shapes")
    }

    fn sample_inputs(s: &SampleVars) -> impl Iterator<Item = usize> + '_ {
        s.params.iter().map(|v| v.0)
    }

    /// Values of a decoupled sample at the rows of `x` (`n x n_out`).
    pub fn sample_values(&mut self, x: Var, s: &SampleVars) -> Var {
        let sample = self.build_sample(s);
        let xv = self.value(x).clone();
        let n_out = sample.outputs();
        let mut y = Tensor::zeros(xv.rows(), n_out);
        for r in 0..xv.rows() {
            sample.value(xv.row(r), y.row_mut(r));
        }
        let mut inputs = vec![x.0];
        inputs.extend(Tape::sample_inputs(s));
        self.push(
            "sample_values",
            y,
            inputs,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let mut grads = sample.zero_grads();
                for r in 0..xv.rows() {
                    sample.vjp_value(xv.row(r), g.row(r), gx.row_mut(r), &mut grads);
                }
                let mut out = vec![gx];
                out.extend(grads);
                out
            })),
        )
    }

    /// Fixed-step RK4 rollouts of the sampled field, one per row of `x0`.
    /// The result stacks each problem's output states in order. Problems run
    /// in parallel; the result and its gradients do not depend on scheduling.
    pub fn rollout(&mut self, x0: Var, s: &SampleVars, ivps: &[Ivp], step: f64) -> Var {
        assert_eq!(
            self.shape(x0).0,
            ivps.len(),
            "one initial state per problem"
        );
        let field = Arc::new(
            SampledField::new(self.build_sample(s), s.kind).expect("field kind matches outputs"),
        );
        let x0v = self.value(x0).clone();
        let dim = x0v.cols();
        let records: Vec<RolloutRecord> = ivps
            .par_iter()
            .enumerate()
            .map(|(i, ivp)| RolloutRecord::forward(field.as_ref(), x0v.row(i), ivp, step))
            .collect();
        let total: usize = ivps.iter().map(|p| p.times.len()).sum();
        let mut data = Vec::with_capacity(total * dim);
        for r in &records {
            data.extend_from_slice(&r.outputs);
        }
        let y = Tensor::from_vec(total, dim, data);
        let offsets: Vec<usize> = ivps
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.times.len();
                Some(o)
            })
            .collect();
        let mut inputs = vec![x0.0];
        inputs.extend(Tape::sample_inputs(s));
        let records = Arc::new(records);
        self.push(
            "rollout",
            y,
            inputs,
            Some(Box::new(move |g| {
                let parts: Vec<(Vec<f64>, SampleGrads)> = records
                    .par_iter()
                    .zip(offsets.par_iter())
                    .map(|(rec, &off)| rec.backward(field.as_ref(), g, off))
                    .collect();
                let mut gx0 = Tensor::zeros(parts.len(), dim);
                let mut grads = field.sample.zero_grads();
                for (i, (gx, gs)) in parts.into_iter().enumerate() {
                    gx0.row_mut(i).copy_from_slice(&gx);
                    for (acc, t) in grads.iter_mut().zip(&gs) {
                        acc.add_assign(t);
                    }
                }
                let mut out = vec![gx0];
                out.extend(grads);
                out
            })),
        )
    }
}

/// Stage inputs of every RK4 step of one problem, for the discrete adjoint.
struct RolloutRecord {
    dim: usize,
    /// `(substeps, step size)` before each output.
    schedule: Vec<(usize, f64)>,
    /// Four stage inputs per step, flattened.
    stages: Vec<f64>,
    outputs: Vec<f64>,
}

impl RolloutRecord {
    fn forward(field: &SampledField, x0: &[f64], ivp: &Ivp, step: f64) -> Self {
        let dim = x0.len();
        let mut x = x0.to_vec();
        let mut t = ivp.t0;
        let mut w = Rk4Work::new(dim);
        let mut schedule = Vec::with_capacity(ivp.times.len());
        let mut stages = Vec::new();
        let mut outputs = Vec::with_capacity(ivp.times.len() * dim);
        for &target in &ivp.times {
            let (n, h) = rk4_substeps(target - t, step);
            for _ in 0..n {
                rk4_step(field, &mut x, h, &mut w, Some(&mut stages));
            }
            schedule.push((n, h));
            outputs.extend_from_slice(&x);
            t = target;
        }
        RolloutRecord {
            dim,
            schedule,
            stages,
            outputs,
        }
    }

    fn backward(&self, field: &SampledField, g: &Tensor, offset: usize) -> (Vec<f64>, SampleGrads) {
        let dim = self.dim;
        let mut grads = field.sample.zero_grads();
        let mut lam = vec![0.0; dim];
        let mut gk = [
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
        ];
        let mut gy = vec![0.0; dim];
        let mut step_index = self.stages.len() / (4 * dim);
        for (k, &(n, h)) in self.schedule.iter().enumerate().rev() {
            for (l, gi) in lam.iter_mut().zip(g.row(offset + k)) {
                *l += gi;
            }
            for _ in 0..n {
                step_index -= 1;
                let base = step_index * 4 * dim;
                let stage = |s: usize| &self.stages[base + s * dim..base + (s + 1) * dim];
                let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                for (s, gks) in gk.iter_mut().enumerate() {
                    for (a, l) in gks.iter_mut().zip(&lam) {
                        *a = weights[s] * l;
                    }
                }
                // stage s input is x + c_s h k_{s-1}
                let coupling = [0.0, 0.5 * h, 0.5 * h, h];
                for s in (0..4).rev() {
                    gy.iter_mut().for_each(|v| *v = 0.0);
                    field.vjp(stage(s), &gk[s], &mut gy, &mut grads);
                    for a in 0..dim {
                        lam[a] += gy[a];
                    }
                    if s > 0 {
                        let (lo, _) = gk.split_at_mut(s);
                        for a in 0..dim {
                            lo[s - 1][a] += coupling[s] * gy[a];
                        }
                    }
                }
            }
        }
        (lam, grads)
    }
}

/// Log-density of `y` under `N(mean, var I)`, summed over all entries; `var`
/// is a `1 x 1` node.
pub fn gaussian_log_density(tape: &mut Tape, y: Var, mean: Var, var: Var) -> Var {
    let n = tape.value(y).len() as f64;
    let r = tape.sub(y, mean);
    let sq = tape.square(r);
    let ss = tape.sum(sq);
    let inv = tape.unary("reciprocal", var, |v| 1.0 / v, |_, y| -y * y);
    let quad = tape.mul(ss, inv);
    let quad = tape.scale(quad, -0.5);
    let lv = tape.log(var);
    let norm = tape.scale(lv, -0.5 * n);
    let out = tape.add(quad, norm);
    tape.add_const(out, -0.5 * n * (2.0 * PI).ln())
}

/// Reparameterised draw `mean + exp(log_std) ⊙ eps`.
pub fn reparameterize(tape: &mut Tape, mean: Var, log_std: Var, eps: &Tensor) -> Var {
    let std = tape.exp(log_std);
    let e = tape.constant(eps.clone());
    let scaled = tape.mul(std, e);
    tape.add(mean, scaled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    WhitenedMean,
    WhitenedChol,
    InducingInputs,
    LogLengthscale,
    LogSignalVariance,
    LogObsNoise,
    InitialStateMean,
    InitialStateLogStd,
    ShootingMean,
    ShootingLogStd,
}

/// A named optimisation variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub role: ParamRole,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(role: ParamRole, value: Tensor) -> Self {
        Parameter { role, value }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` given the gradients of the loss.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = grads
                .iter()
                .map(|g| Tensor::zeros(g.rows(), g.cols()))
                .collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::slot;
    use crate::kernel::{energy_cov, KernelHyper};
    use crate::odeint::{integrate_from, SolverSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.sample(StandardNormal)).collect(),
        )
    }

    /// Central-difference check of `build` against the tape gradient for
    /// every entry of every input.
    fn check_fd(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let eval = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out).item()
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &vars);
        let g = t.backward(out).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let gk = g.wrt(*v);
            for i in 0..inputs[k].len() {
                let h = 1e-6;
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = gk.data()[i];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "input {k} entry {i}: fd {fd} vs reverse {an}"
                );
            }
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let m = Tensor::column(vec![0.3, -1.2, 2.0]);
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let sq = t.square(v);
        let s = t.sum(sq);
        let out = t.scale(s, 0.5);
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(v), m);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 2, 3).map(|v| v.abs() + 0.5);
        check_fd(
            &[a, b],
            |t, v| {
                let e = t.exp(v[0]);
                let l = t.log(v[1]);
                let s = t.sin(v[0]);
                let c = t.cos(v[1]);
                let r = t.sqrt(v[1]);
                let m = t.mul(e, l);
                let d = t.div(s, r);
                let x = t.add(m, d);
                let x = t.sub(x, c);
                let x = t.neg(x);
                let x = t.add_const(x, 0.7);
                let x = t.square(x);
                t.sum(x)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 3, 2);
        let b = randn(&mut rng, 2, 4);
        let l = Tensor::column(vec![0.8, 1.7]);
        let s = Tensor::scalar(1.3);
        check_fd(
            &[a, b, l, s],
            |t, v| {
                let p = t.matmul(v[0], v[1]);
                let q = t.div_cols(v[0], v[2]);
                let q = t.mul_scalar(q, v[3]);
                let qt = t.transpose(q);
                let r = t.concat_rows(&[q, v[0]]);
                let g = t.gather_rows(r, vec![3, 0, 0, 5]);
                let g = t.matmul(g, qt);
                let c = t.concat_cols(&[p, p]);
                let e = t.element(c, 2, 5);
                let sq = t.square(g);
                let x = t.sum(sq);
                let y = t.dot(p, p);
                let z = t.add(x, y);
                t.add(z, e)
            },
            1e-6,
        );
    }

    #[test]
    fn triangular_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = randn(&mut rng, 4, 4).scale(0.3);
        let b = randn(&mut rng, 4, 2);
        let z = randn(&mut rng, 4, 2);
        let l = Tensor::column(vec![0.9, 1.4]);
        let s = Tensor::scalar(0.8);
        check_fd(
            &[raw, b, z, l, s],
            |t, v| {
                let lt = t.positive_tril(v[0]);
                let d = t.diag(v[0]);
                let k = t.gram(v[2], v[3], v[4], 1e-3);
                let lk = t.cholesky(k).unwrap();
                let x = t.solve_lower(lk, v[1]);
                let y = t.solve_lower_t(lt, x);
                let w = t.matmul(lt, y);
                let sq = t.square(w);
                let a = t.sum(sq);
                let e = t.sum(d);
                t.add(a, e)
            },
            1e-5,
        );
    }

    #[test]
    fn kernel_gradient_wrt_inducing_input() {
        let x = Tensor::from_rows(&[vec![0.2, -0.4]]);
        let z = Tensor::from_rows(&[vec![0.9, 0.3]]);
        let hyp = KernelHyper::new(&[0.7, 1.3], 1.5).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let zv = t.leaf(z.clone());
        let lv = t.constant(Tensor::column(hyp.lengthscales()));
        let sv = t.scalar(1.5);
        let pts = t.concat_rows(&[xv, zv]);
        let k = t.gram(pts, lv, sv, 0.0);
        let kxz = t.element(k, 0, 1);
        assert!(
            (t.value(kxz).item() - energy_cov(x.row(0), z.row(0), &hyp).unwrap()).abs() < 1e-15
        );
        let g = t.backward(kxz).unwrap().wrt(zv);
        for d in 0..2 {
            let h = 1e-5;
            let mut zp = z.row(0).to_vec();
            zp[d] += h;
            let mut zm = z.row(0).to_vec();
            zm[d] -= h;
            let fd = (energy_cov(x.row(0), &zp, &hyp).unwrap()
                - energy_cov(x.row(0), &zm, &hyp).unwrap())
                / (2.0 * h);
            assert!((fd - g.data()[d]).abs() < 1e-4 * fd.abs().max(1e-12));
        }
    }

    #[test]
    fn non_finite_value_names_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(-1.0));
        let l = t.log(a);
        let s = t.sqrt(l);
        match t.backward(s) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    fn random_sample_tensors(rng: &mut ChaCha8Rng, dim: usize, kind: FieldKind) -> Vec<Tensor> {
        let n_out = kind.outputs(dim);
        let (s, m) = (6, 3);
        vec![
            randn(rng, s, n_out).scale(0.4),
            randn(rng, s, dim),
            randn(rng, m, n_out).scale(0.5),
            randn(rng, m, dim),
            Tensor::column((0..dim).map(|_| rng.random_range(0.7..1.5)).collect()),
            Tensor::scalar(rng.random_range(0.5..1.5)),
        ]
    }

    fn sample_vars(v: &[Var], phases: &[f64], kind: FieldKind) -> SampleVars {
        SampleVars {
            params: [v[0], v[1], v[2], v[3], v[4], v[5]],
            phases: Arc::new(phases.to_vec()),
            kind,
        }
    }

    #[test]
    fn sample_values_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [FieldKind::Hamiltonian, FieldKind::Independent] {
            let mut inputs = random_sample_tensors(&mut rng, 2, kind);
            let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.28)).collect();
            inputs.push(randn(&mut rng, 3, 2));
            check_fd(
                &inputs,
                |t, v| {
                    let s = sample_vars(v, &phases, kind);
                    let h = t.sample_values(v[6], &s);
                    let sq = t.square(h);
                    t.sum(sq)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn rollout_matches_solver_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (dim, kind) in [(2, FieldKind::Hamiltonian), (4, FieldKind::Independent)] {
            let mut inputs = random_sample_tensors(&mut rng, dim, kind);
            let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.28)).collect();
            inputs.push(randn(&mut rng, 2, dim).scale(0.5));
            let ivps = vec![
                Ivp {
                    t0: 0.0,
                    times: vec![0.0, 0.3, 0.55],
                },
                Ivp {
                    t0: 0.25,
                    times: vec![0.5, 0.5, 0.9],
                },
            ];
            let step = 0.05;

            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
            let s = sample_vars(&vars, &phases, kind);
            let out = t.rollout(vars[6], &s, &ivps, step);
            let field = SampledField::new(t.build_sample(&s), kind).unwrap();
            let mut row = 0;
            for (i, ivp) in ivps.iter().enumerate() {
                let xs = integrate_from(
                    &field,
                    inputs[6].row(i),
                    ivp.t0,
                    &ivp.times,
                    &SolverSpec::rk4(step),
                )
                .unwrap();
                for x in xs {
                    assert_eq!(t.value(out).row(row), x.as_slice());
                    row += 1;
                }
            }

            let weights = randn(&mut rng, 6, dim);
            check_fd(
                &inputs,
                |t, v| {
                    let s = sample_vars(v, &phases, kind);
                    let y = t.rollout(v[6], &s, &ivps, step);
                    let w = t.constant(weights.clone());
                    let sin = t.sin(y);
                    t.dot(sin, w)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn rollout_jacobian_predicts_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = random_sample_tensors(&mut rng, 2, FieldKind::Hamiltonian);
        let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.28)).collect();
        let x0 = Tensor::from_rows(&[vec![0.3, -0.2]]);
        let ivps = vec![Ivp {
            t0: 0.0,
            times: vec![2.0],
        }];
        let terminal = |x0: &Tensor, c: &[f64]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
            let x = t.leaf(x0.clone());
            let s = sample_vars(&vars, &phases, FieldKind::Hamiltonian);
            let y = t.rollout(x, &s, &ivps, 0.01);
            let cv = t.constant(Tensor::from_rows(&[c.to_vec()]));
            let o = t.dot(y, cv);
            let val = t.value(o).item();
            (val, t.backward(o).unwrap().wrt(x))
        };
        let delta = [1e-4, -2e-4];
        for c in [[1.0, 0.0], [0.0, 1.0]] {
            let (base, jt) = terminal(&x0, &c);
            let moved = x0.zip_map(&Tensor::from_rows(&[delta.to_vec()]), |a, b| a + b);
            let (pert, _) = terminal(&moved, &c);
            let predicted = dot(jt.data(), &delta);
            // first-order agreement: the residual is O(|δ|²)
            assert!(
                ((pert - base) - predicted).abs() < 1e-6,
                "{} vs {}",
                pert - base,
                predicted
            );
        }
    }

    #[test]
    fn rollout_without_steps_returns_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = random_sample_tensors(&mut rng, 2, FieldKind::Hamiltonian);
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
        let x = t.leaf(Tensor::from_rows(&[vec![0.1, 0.2]]));
        let s = sample_vars(&vars, &[0.0; 6], FieldKind::Hamiltonian);
        let y = t.rollout(
            x,
            &s,
            &[Ivp {
                t0: 1.0,
                times: vec![1.0],
            }],
            0.1,
        );
        assert_eq!(t.value(y).data(), &[0.1, 0.2]);
        let o = t.sum(y);
        let g = t.backward(o).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(vars[slot::FEATURE_WEIGHTS]).sum(), 0.0);
    }

    #[test]
    fn gaussian_helpers() {
        let y = Tensor::column(vec![0.5, -1.0]);
        let m = Tensor::column(vec![0.2, 0.1]);
        let var = Tensor::scalar(0.7);
        check_fd(
            &[y, m, var],
            |t, v| gaussian_log_density(t, v[0], v[1], v[2]),
            1e-6,
        );
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(0.0));
        let b = t.leaf(Tensor::scalar(0.0));
        let s = t.scalar(1.0);
        let lp = gaussian_log_density(&mut t, a, b, s);
        assert!((t.value(lp).item() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let mean = t.leaf(Tensor::scalar(1.0));
        let ls = t.leaf(Tensor::scalar(0.5f64.ln()));
        let x = reparameterize(&mut t, mean, ls, &Tensor::scalar(2.0));
        assert!((t.value(x).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Tensor::column(vec![3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.update(&mut [&mut p], &[g]);
        }
        assert!(p.norm() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut p = Tensor::column(vec![1.0, 1.0]);
        let mut opt = Adam::new(0.003);
        opt.update(&mut [&mut p], &[Tensor::column(vec![5.0, -0.01])]);
        assert!((p.data()[0] - 0.997).abs() < 1e-9);
        assert!((p.data()[1] - 1.003).abs() < 1e-6);
    }
}
