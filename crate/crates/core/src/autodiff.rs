//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive evaluated during a forward pass.
//! Parameters are registered up front from a [`ParamSet`]; a program looks
//! them up by name with [`Graph::param`]. [`value_and_grad`] runs a program
//! and pulls the gradient of its scalar output back onto every parameter
//! that took part.
//!
//! The primitive set is deliberately small: affine maps (`matmul` +
//! `add_bias`), leaky-ReLU, tanh, elementwise arithmetic, reductions,
//! row/matrix cosine similarity, softmax cross-entropy, and a few column
//! shuffles. Every forward value is checked for finiteness; a non-finite
//! value aborts with [`Error::NumericOverflow`] naming the primitive.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, pairwise_sum, ParamSet, Tensor};

/// Slope used by every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowCosine(Var, Var),
    CosineMatrix(Var, Var),
    Transpose(Var),
    SoftmaxXent(Var, Vec<usize>),
    ColumnMap(Var, Vec<Option<usize>>),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn check(primitive: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            primitive,
            detail: format!("non-finite value in output of shape {:?}", t.shape()),
        })
    }
}

fn row_norms(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    Ok(row_sq_norms(t, what)?.into_iter().map(f64::sqrt).collect())
}

fn row_sq_norms(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let n = dot(t.row(r), t.row(r));
            if n == 0.0 {
                Err(Error::DegenerateInput(format!(
                    "cosine similarity of a zero vector ({what}, row {r})"
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph with every entry of `params` registered as a differentiable leaf.
    pub fn with_params(params: &ParamSet) -> Self {
        let mut g = Self::new();
        g.add_params(params);
        g
    }

    /// Register further differentiable leaves; a repeated name replaces the
    /// earlier binding.
    pub fn add_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            let v = self.push(t.clone(), Op::Param);
            self.params.insert(name.clone(), v);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, primitive: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check(primitive, &value)?;
        Ok(self.push(value, op))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not registered")))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.emit("matmul", out, Op::MatMul(a, b))
    }

    /// `x[n×m] + b[m]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        if bv.len() != m {
            return Err(Error::contract(format!(
                "bias of length {} for {m} columns",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.emit("add_bias", out, Op::AddBias(x, b))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::contract(format!(
                "{name}: shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.emit(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.emit("scale", out, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.emit("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.emit("tanh", out, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(pairwise_sum(self.value(a).data()));
        self.emit("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(pairwise_sum(t.data()) / t.len() as f64);
        self.emit("mean", out, Op::Mean(a))
    }

    /// Per-row sums of a matrix, as a vector of length `rows`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::vector((0..t.rows()).map(|r| pairwise_sum(t.row(r))).collect());
        self.emit("row_sum", out, Op::RowSum(a))
    }

    /// Cosine similarity of matching rows, as a vector of length `rows`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::contract(format!(
                "row_cosine: shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let na = row_sq_norms(av, "left operand")?;
        let nb = row_sq_norms(bv, "right operand")?;
        let out = (0..av.rows())
            .map(|r| cosine(dot(av.row(r), bv.row(r)), na[r], nb[r]))
            .collect();
        self.emit("row_cosine", Tensor::vector(out), Op::RowCosine(a, b))
    }

    /// `S[p][q] = cos(a_p, b_q)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::contract(format!(
                "cosine_matrix: widths {} and {}",
                av.cols(),
                bv.cols()
            )));
        }
        let na = row_sq_norms(av, "left operand")?;
        let nb = row_sq_norms(bv, "right operand")?;
        let (n, m) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(n * m);
        for p in 0..n {
            for q in 0..m {
                out.push(cosine(dot(av.row(p), bv.row(q)), na[p], nb[q]));
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.emit("cosine_matrix", out, Op::CosineMatrix(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.emit("transpose", out, Op::Transpose(a))
    }

    /// Mean over rows of `logsumexp(logits_r) − logits_r[target_r]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = (t.rows(), t.cols());
        if targets.len() != n || n == 0 {
            return Err(Error::contract(format!(
                "softmax_xent: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::contract(format!("target class {bad} out of {k}")));
        }
        let per_row: Vec<f64> = (0..n)
            .map(|r| {
                let row = t.row(r);
                log_sum_exp(row) - row[targets[r]]
            })
            .collect();
        let out = Tensor::scalar(pairwise_sum(&per_row) / n as f64);
        self.emit("softmax_xent", out, Op::SoftmaxXent(logits, targets.to_vec()))
    }

    /// `out[:, t] = x[:, map[t]]`, or zero where `map[t]` is `None`.
    pub fn column_map(&mut self, x: Var, map: &[Option<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (n, w) = (t.rows(), t.cols());
        if let Some(bad) = map.iter().flatten().find(|&&c| c >= w) {
            return Err(Error::contract(format!("column_map: source column {bad} of {w}")));
        }
        let m = map.len();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = t.row(r);
            for (c, src) in map.iter().enumerate() {
                if let Some(s) = src {
                    out[r * m + c] = row[*s];
                }
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        self.emit("column_map", out, Op::ColumnMap(x, map.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let map: Vec<Option<usize>> = (start..end).map(Some).collect();
        self.column_map(x, &map)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hcat(&tensors)?;
        self.emit("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every node
    /// that `loss` depends on.
    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; n * k];
                    matmul_nt_into(gout.data(), bv.data(), &mut ga, n, m, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_tn_into(av.data(), gout.data(), &mut gb, n, k, m);
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in gout.data().chunks(m.max(1)) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    accumulate(&mut grads, *b, self.value(*b).shape(), gb);
                    accumulate(&mut grads, *x, gout.shape(), gout.data().to_vec());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.shape(), gout.data().to_vec());
                    accumulate(&mut grads, *b, gout.shape(), gout.data().to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, gout.shape(), gout.data().to_vec());
                    let neg = gout.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, gout.shape(), neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = gout.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb = gout.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Scale(a, c) => {
                    let ga = gout.data().iter().map(|g| g * c).collect();
                    accumulate(&mut grads, *a, gout.shape(), ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a);
                    let ga = gout
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = gout
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *a, y.shape(), ga);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, av.shape(), vec![gout.item(); av.len()]);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let g = gout.item() / av.len() as f64;
                    accumulate(&mut grads, *a, av.shape(), vec![g; av.len()]);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let ga = (0..av.len()).map(|i| gout.data()[i / c]).collect();
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::RowCosine(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = row_cosine_backward(av, bv, &node.value, &gout)?;
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::CosineMatrix(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = cosine_matrix_backward(av, bv, &node.value, &gout)?;
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Transpose(a) => {
                    let gt = gout.transpose();
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, &shape, gt.into_data());
                }
                Op::SoftmaxXent(l, targets) => {
                    let lv = self.value(*l);
                    let (n, k) = (lv.rows(), lv.cols());
                    let scale = gout.item() / n as f64;
                    let mut gl = vec![0.0; n * k];
                    for r in 0..n {
                        let row = lv.row(r);
                        let lse = log_sum_exp(row);
                        for c in 0..k {
                            gl[r * k + c] = (row[c] - lse).exp() * scale;
                        }
                        gl[r * k + targets[r]] -= scale;
                    }
                    accumulate(&mut grads, *l, lv.shape(), gl);
                }
                Op::ColumnMap(x, map) => {
                    let xv = self.value(*x);
                    let (n, w, m) = (xv.rows(), xv.cols(), map.len());
                    let mut gx = vec![0.0; n * w];
                    for r in 0..n {
                        for (c, src) in map.iter().enumerate() {
                            if let Some(s) = src {
                                gx[r * w + s] += gout.data()[r * m + c];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::ConcatCols(parts) => {
                    let total = gout.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut gp = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            gp.extend_from_slice(&gout.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, *p, pv.shape(), gp);
                        offset += w;
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every registered parameter that it
    /// depends on. Parameters outside the loss's cone are omitted.
    pub fn param_grads(&self, loss: Var) -> Result<ParamSet> {
        let grads = self.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                check("backward", g)?;
                out.insert(name.clone(), g.clone());
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot / √(‖a‖²‖b‖²)`, which is exactly 1 for `a = b` under correctly
/// rounded square roots.
fn cosine(dot: f64, sa: f64, sb: f64) -> f64 {
    dot / (sa * sb).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape mirrors value shape"));
        }
    }
}

fn row_cosine_backward(a: &Tensor, b: &Tensor, s: &Tensor, gout: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let na = row_norms(a, "left operand")?;
    let nb = row_norms(b, "right operand")?;
    let w = a.cols();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for r in 0..a.rows() {
        let g = gout.data()[r];
        let sr = s.data()[r];
        let (ar, br) = (a.row(r), b.row(r));
        for c in 0..w {
            ga[r * w + c] = g * (br[c] / (na[r] * nb[r]) - sr * ar[c] / (na[r] * na[r]));
            gb[r * w + c] = g * (ar[c] / (na[r] * nb[r]) - sr * br[c] / (nb[r] * nb[r]));
        }
    }
    Ok((ga, gb))
}

fn cosine_matrix_backward(a: &Tensor, b: &Tensor, s: &Tensor, gout: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let na = row_norms(a, "left operand")?;
    let nb = row_norms(b, "right operand")?;
    let (n, m, w) = (a.rows(), b.rows(), a.cols());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for p in 0..n {
        let ap = a.row(p);
        for q in 0..m {
            let g = gout.data()[p * m + q];
            if g == 0.0 {
                continue;
            }
            let spq = s.data()[p * m + q];
            let bq = b.row(q);
            let inv = 1.0 / (na[p] * nb[q]);
            let ca = spq / (na[p] * na[p]);
            let cb = spq / (nb[q] * nb[q]);
            for c in 0..w {
                ga[p * w + c] += g * (bq[c] * inv - ca * ap[c]);
                gb[q * w + c] += g * (ap[c] * inv - cb * bq[c]);
            }
        }
    }
    Ok((ga, gb))
}

/// Evaluate `program` on a fresh graph holding `params` and return the
/// scalar it produces together with its gradient for each parameter.
///
/// Parameters the program never touches get a zero gradient so the result
/// always has the same names and shapes as `params`.
pub fn value_and_grad<F>(params: &ParamSet, program: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = program(&mut g)?;
    let value = g.value(loss).item();
    let touched = g.param_grads(loss)?;
    let mut grads = params.zeros_like();
    grads.merge(&touched);
    Ok((value, grads))
}

/// Only the forward value of `program`.
pub fn evaluate<F>(params: &ParamSet, program: F) -> Result<f64>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let out = program(&mut g)?;
    Ok(g.value(out).item())
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over all
/// parameter coordinates.
pub fn grad_check<F>(program: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract(format!("grad_check step must be positive, got {step}")));
    }
    let (_, analytic) = value_and_grad(params, &program)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let ga = analytic.require(name)?;
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("cloned from params").data_mut()[i] = orig + step;
            let up = evaluate(&probe, &program)?;
            probe.get_mut(name).expect("cloned from params").data_mut()[i] = orig - step;
            let down = evaluate(&probe, &program)?;
            probe.get_mut(name).expect("cloned from params").data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NumericOverflow {
                    primitive: "grad_check",
                    detail: format!("finite difference for `{name}`[{i}] is {fd}"),
                });
            }
            let a = ga.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
