//! Reverse-mode gradient tape over small dense tensors.
//!
//! Every differentiable operation pushes one node holding its forward value
//! and the indices of its inputs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, so gradient accumulation order is fixed and two
//! identical forward passes yield bitwise-identical gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{activation, check_linear, matvec_acc, softmax_temp_raw, Matrix};
use crate::error::{Error, Result};

/// Index of a learnable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Constant,
    Param,
    Linear,
    Add,
    Activation,
    Softmax,
    Concat,
    Mask,
    Gather,
    Scatter,
    Normalize,
    Scale,
    Sum,
    Mean,
    ConstMatVec,
    Mse,
    SqDev,
    Jsd,
    Lincomb,
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parameter(format!("unknown tape op `{s}`")))
    }
}

/// Test fixture: scales every adjoint contribution emitted by one op kind.
/// Used as a negative control for the gradient oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: OpKind,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { w: Var, x: Var, b: Var },
    Add(Var, Var),
    Activation(Var),
    Softmax { x: Var, tau: f64 },
    Concat(Var, Var),
    Mask { x: Var, keep: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Scatter { x: Var, idx: Vec<usize> },
    Normalize { x: Var, sum: f64 },
    Scale { x: Var, s: Var, i: usize },
    Sum(Vec<Var>),
    Mean(Vec<Var>),
    ConstMatVec { m: Matrix, x: Var },
    Mse { pred: Var, target: Vec<f64> },
    SqDev { x: Var, center: f64 },
    Jsd { p: Var, q: Var },
    Lincomb(Vec<(f64, Var)>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Activation(_) => OpKind::Activation,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Mask { .. } => OpKind::Mask,
            Op::Gather { .. } => OpKind::Gather,
            Op::Scatter { .. } => OpKind::Scatter,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::ConstMatVec { .. } => OpKind::ConstMatVec,
            Op::Mse { .. } => OpKind::Mse,
            Op::SqDev { .. } => OpKind::SqDev,
            Op::Jsd { .. } => OpKind::Jsd,
            Op::Lincomb(_) => OpKind::Lincomb,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Gradients keyed by parameter, one entry per parameter bound during forward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<f64>)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
    fault: Option<AdjointFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: AdjointFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-entry node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let n = &self.nodes[v.0];
        if n.cols != 1 {
            return Err(Error::dim(op, "a column vector", format!("{}x{}", n.rows, n.cols)));
        }
        Ok(n.rows)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, Op::Constant)
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> Var {
        self.push(m.as_slice().to_vec(), m.rows(), m.cols(), Op::Constant)
    }

    /// Binds a learnable tensor; binding the same id twice returns the same node.
    pub fn param(&mut self, id: ParamId, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::dim("param", rows * cols, data.len()));
        }
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let v = self.push(data.to_vec(), rows, cols, Op::Param(id));
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.shape(w);
        let xn = self.expect_vector("linear", x)?;
        let bn = self.expect_vector("linear", b)?;
        check_linear(rows, cols, xn, bn)?;
        let mut out = self.value(b).to_vec();
        matvec_acc(self.value(w), cols, self.value(x), &mut out);
        Ok(self.push(out, rows, 1, Op::Linear { w, x, b }))
    }

    /// `M x` for a constant `M` that never receives gradient.
    pub fn const_matvec(&mut self, m: &Matrix, x: Var) -> Result<Var> {
        let xn = self.expect_vector("const_matvec", x)?;
        if xn != m.cols() {
            return Err(Error::dim("const_matvec", m.cols(), xn));
        }
        let mut out = vec![0.0; m.rows()];
        matvec_acc(m.as_slice(), m.cols(), self.value(x), &mut out);
        let rows = m.rows();
        Ok(self.push(out, rows, 1, Op::ConstMatVec { m: m.clone(), x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(out, r, c, Op::Add(a, b)))
    }

    pub fn activation(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| activation(*v)).collect();
        let (r, c) = self.shape(x);
        self.push(out, r, c, Op::Activation(x))
    }

    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Result<Var> {
        let n = self.expect_vector("softmax_temp", x)?;
        let out = softmax_temp_raw(self.value(x), tau)?;
        Ok(self.push(out, n, 1, Op::Softmax { x, tau }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.expect_vector("concat", a)?;
        let nb = self.expect_vector("concat", b)?;
        let mut out = Vec::with_capacity(na + nb);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        Ok(self.push(out, na + nb, 1, Op::Concat(a, b)))
    }

    /// Zeroes every entry whose index is not in `keep`.
    pub fn mask(&mut self, x: Var, keep: &[usize]) -> Result<Var> {
        let n = self.expect_vector("mask", x)?;
        if let Some(bad) = keep.iter().find(|&&i| i >= n) {
            return Err(Error::dim("mask", format!("indices below {n}"), bad));
        }
        let src = self.value(x);
        let mut out = vec![0.0; n];
        for &i in keep {
            out[i] = src[i];
        }
        Ok(self.push(out, n, 1, Op::Mask { x, keep: keep.to_vec() }))
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.expect_vector("gather", x)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("indices below {n}"), bad));
        }
        let src = self.value(x);
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(out, idx.len(), 1, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Inverse of [`Tape::gather`]: places `x[j]` at position `idx[j]` of a zero vector of length `len`.
    pub fn scatter(&mut self, x: Var, idx: &[usize], len: usize) -> Result<Var> {
        let n = self.expect_vector("scatter", x)?;
        if n != idx.len() {
            return Err(Error::dim("scatter", idx.len(), n));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::dim("scatter", format!("indices below {len}"), bad));
        }
        let src = self.value(x);
        let mut out = vec![0.0; len];
        for (j, &i) in idx.iter().enumerate() {
            out[i] += src[j];
        }
        Ok(self.push(out, len, 1, Op::Scatter { x, idx: idx.to_vec() }))
    }

    /// `x / sum(x)`; the sum must be strictly positive.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.expect_vector("normalize", x)?;
        let sum: f64 = self.value(x).iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::Input(format!("cannot normalize a vector with sum {sum}")));
        }
        let out: Vec<f64> = self.value(x).iter().map(|v| v / sum).collect();
        Ok(self.push(out, n, 1, Op::Normalize { x, sum }))
    }

    /// `x * s[i]`.
    pub fn scale(&mut self, x: Var, s: Var, i: usize) -> Result<Var> {
        if i >= self.len_of(s) {
            return Err(Error::dim("scale", format!("index below {}", self.len_of(s)), i));
        }
        let f = self.value(s)[i];
        let out: Vec<f64> = self.value(x).iter().map(|v| v * f).collect();
        let (r, c) = self.shape(x);
        Ok(self.push(out, r, c, Op::Scale { x, s, i }))
    }

    fn same_shapes(&self, op: &'static str, xs: &[Var]) -> Result<(usize, usize)> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Input(format!("{op} of no operands")))?;
        let shape = self.shape(first);
        for &x in xs {
            if self.shape(x) != shape {
                return Err(Error::dim(op, format!("{shape:?}"), format!("{:?}", self.shape(x))));
            }
        }
        Ok(shape)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let (r, c) = self.same_shapes("sum", xs)?;
        let mut out = vec![0.0; r * c];
        for &x in xs {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        Ok(self.push(out, r, c, Op::Sum(xs.to_vec())))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let (r, c) = self.same_shapes("mean", xs)?;
        let mut out = vec![0.0; r * c];
        for &x in xs {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        let n = xs.len() as f64;
        for o in &mut out {
            *o /= n;
        }
        Ok(self.push(out, r, c, Op::Mean(xs.to_vec())))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = self.len_of(pred);
        if n != target.len() || n == 0 {
            return Err(Error::dim("mse", n, target.len()));
        }
        let v = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(vec![v], 1, 1, Op::Mse { pred, target: target.to_vec() }))
    }

    /// `sum_i (x_i - center)^2`.
    pub fn sq_dev(&mut self, x: Var, center: f64) -> Var {
        let v = self.value(x).iter().map(|a| (a - center) * (a - center)).sum::<f64>();
        self.push(vec![v], 1, 1, Op::SqDev { x, center })
    }

    /// Jensen-Shannon divergence (nats) between two strictly positive distributions.
    pub fn jsd(&mut self, p: Var, q: Var) -> Result<Var> {
        let v = super::jsd(self.value(p), self.value(q))?;
        Ok(self.push(vec![v], 1, 1, Op::Jsd { p, q }))
    }

    /// `sum_i c_i x_i` over same-shaped operands.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
        let (r, c) = self.same_shapes("lincomb", &vars)?;
        let mut out = vec![0.0; r * c];
        for &(coef, x) in terms {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += coef * v;
            }
        }
        Ok(self.push(out, r, c, Op::Lincomb(terms.to_vec())))
    }

    /// Propagates adjoints from a scalar output back to every bound parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.len_of(output) != 1 {
            return Err(Error::dim("backward", "a scalar output", self.len_of(output)));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut scale = 1.0;
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    scale = f.scale;
                }
            }
            let emit = |adj: &mut Vec<Option<Vec<f64>>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let len = self.nodes[v.0].value.len();
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
                if scale == 1.0 {
                    f(slot);
                } else {
                    let mut tmp = vec![0.0; len];
                    f(&mut tmp);
                    for (s, t) in slot.iter_mut().zip(tmp) {
                        *s += scale * t;
                    }
                }
            };

            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    grads.grads.insert(*id, g);
                }
                Op::Linear { w, x, b } => {
                    let (rows, cols) = self.shape(*w);
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    emit(&mut adj, *x, &mut |gx| {
                        for (r, gr) in g.iter().enumerate() {
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (o, wv) in gx.iter_mut().zip(row) {
                                *o += gr * wv;
                            }
                        }
                    });
                    emit(&mut adj, *w, &mut |gw| {
                        for r in 0..rows {
                            let gr = g[r];
                            for (o, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *o += gr * xv;
                            }
                        }
                    });
                    emit(&mut adj, *b, &mut |gb| {
                        for (o, gr) in gb.iter_mut().zip(&g) {
                            *o += gr;
                        }
                    });
                }
                Op::ConstMatVec { m, x } => {
                    let cols = m.cols();
                    emit(&mut adj, *x, &mut |gx| {
                        for (r, gr) in g.iter().enumerate() {
                            for (o, mv) in gx.iter_mut().zip(&m.as_slice()[r * cols..(r + 1) * cols]) {
                                *o += gr * mv;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        emit(&mut adj, v, &mut |ga| {
                            for (o, gv) in ga.iter_mut().zip(&g) {
                                *o += gv;
                            }
                        });
                    }
                }
                Op::Activation(x) => {
                    let y = &node.value;
                    emit(&mut adj, *x, &mut |gx| {
                        for ((o, gv), yv) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Softmax { x, tau } => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    emit(&mut adj, *x, &mut |gx| {
                        for ((o, gv), yv) in gx.iter_mut().zip(&g).zip(y) {
                            *o += yv * (gv - dot) / tau;
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let na = self.len_of(*a);
                    emit(&mut adj, *a, &mut |ga| {
                        for (o, gv) in ga.iter_mut().zip(&g[..na]) {
                            *o += gv;
                        }
                    });
                    emit(&mut adj, *b, &mut |gb| {
                        for (o, gv) in gb.iter_mut().zip(&g[na..]) {
                            *o += gv;
                        }
                    });
                }
                Op::Mask { x, keep } => {
                    emit(&mut adj, *x, &mut |gx| {
                        for &i in keep {
                            gx[i] += g[i];
                        }
                    });
                }
                Op::Gather { x, idx } => {
                    emit(&mut adj, *x, &mut |gx| {
                        for (j, &i) in idx.iter().enumerate() {
                            gx[i] += g[j];
                        }
                    });
                }
                Op::Scatter { x, idx } => {
                    emit(&mut adj, *x, &mut |gx| {
                        for (j, &i) in idx.iter().enumerate() {
                            gx[j] += g[i];
                        }
                    });
                }
                Op::Normalize { x, sum } => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    emit(&mut adj, *x, &mut |gx| {
                        for (o, gv) in gx.iter_mut().zip(&g) {
                            *o += (gv - dot) / sum;
                        }
                    });
                }
                Op::Scale { x, s, i } => {
                    let f = self.value(*s)[*i];
                    let xv = self.value(*x);
                    let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    emit(&mut adj, *x, &mut |gx| {
                        for (o, gv) in gx.iter_mut().zip(&g) {
                            *o += gv * f;
                        }
                    });
                    emit(&mut adj, *s, &mut |gs| gs[*i] += dot);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        emit(&mut adj, x, &mut |gx| {
                            for (o, gv) in gx.iter_mut().zip(&g) {
                                *o += gv;
                            }
                        });
                    }
                }
                Op::Mean(xs) => {
                    let n = xs.len() as f64;
                    for &x in xs {
                        emit(&mut adj, x, &mut |gx| {
                            for (o, gv) in gx.iter_mut().zip(&g) {
                                *o += gv / n;
                            }
                        });
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let n = pv.len() as f64;
                    emit(&mut adj, *pred, &mut |gp| {
                        for ((o, p), t) in gp.iter_mut().zip(pv).zip(target) {
                            *o += g[0] * 2.0 * (p - t) / n;
                        }
                    });
                }
                Op::SqDev { x, center } => {
                    let xv = self.value(*x);
                    emit(&mut adj, *x, &mut |gx| {
                        for (o, v) in gx.iter_mut().zip(xv) {
                            *o += g[0] * 2.0 * (v - center);
                        }
                    });
                }
                Op::Jsd { p, q } => {
                    let pv = self.value(*p);
                    let qv = self.value(*q);
                    // d JSD / d p_i = 0.5 ln(p_i / m_i)
                    emit(&mut adj, *p, &mut |gp| {
                        for ((o, a), b) in gp.iter_mut().zip(pv).zip(qv) {
                            *o += g[0] * 0.5 * (2.0 * a / (a + b)).ln();
                        }
                    });
                    emit(&mut adj, *q, &mut |gq| {
                        for ((o, a), b) in gq.iter_mut().zip(pv).zip(qv) {
                            *o += g[0] * 0.5 * (2.0 * b / (a + b)).ln();
                        }
                    });
                }
                Op::Lincomb(terms) => {
                    for &(c, x) in terms {
                        emit(&mut adj, x, &mut |gx| {
                            for (o, gv) in gx.iter_mut().zip(&g) {
                                *o += c * gv;
                            }
                        });
                    }
                }
            }
        }
        Ok(grads)
    }
}
