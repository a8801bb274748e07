//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node to the tape and evaluates eagerly. The
//! recording order is a topological order, so `backward` is a single reverse
//! sweep. A graph may be differentiated once; call [`Graph::reset_grads`]
//! before differentiating it again.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-registered operation: given the input values and
/// the upstream gradient, return one gradient buffer per input.
pub type CustomBackward = Arc<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Linear { w: Var, b: Var, x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Max(Var, Var),
    Mean { input: Var, axis: usize },
    Tanh(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        scale: f64,
        probs: Vec<f64>,
    },
    Gather { table: Var, indices: Vec<usize> },
    RowMul { rows: Var, vector: Var },
    WeightedSum { weights: Var, rows: Var },
    Stack(Vec<Var>),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Max(..) => "elementwise_max",
            Op::Mean { .. } => "mean_over_axis",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::RowMul { .. } => "row_mul",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Stack(..) => "stack",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<_> = self.nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Graph")
            .field("ops", &ops)
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_softmax(z: &[f64], out: &mut [f64]) {
    let mu = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - mu).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `μ + ln Σ exp(z − μ)` with `μ = max z`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let mu = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = z.iter().map(|&v| (v - mu).exp()).sum();
    mu + total.ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. The leaf is differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Affine map `W·x + b` for `x` of shape `[d]` or a batch `[n, d]`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (wt, bt, xt) = (self.value(w), self.value(b), self.value(x));
        if wt.rank() != 2 || bt.rank() != 1 || !(xt.rank() == 1 || xt.rank() == 2) {
            return Err(Error::dim(format!(
                "linear: W {:?}, b {:?}, x {:?} do not conform",
                wt.shape(),
                bt.shape(),
                xt.shape()
            )));
        }
        let (c, d) = (wt.shape()[0], wt.shape()[1]);
        let xd = *xt.shape().last().unwrap();
        if bt.shape()[0] != c || xd != d {
            return Err(Error::dim(format!(
                "linear: W {:?}, b {:?}, x {:?} do not conform",
                wt.shape(),
                bt.shape(),
                xt.shape()
            )));
        }
        let n = if xt.rank() == 1 { 1 } else { xt.shape()[0] };
        let (wd, bd, xdata) = (wt.data(), bt.data(), xt.data());
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let xrow = &xdata[i * d..(i + 1) * d];
            for r in 0..c {
                let wrow = &wd[r * d..(r + 1) * d];
                let dot: f64 = wrow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                out.push(dot + bd[r]);
            }
        }
        let shape = if xt.rank() == 1 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { w, b, x }, &[w, b, x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("add", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("mul", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(at.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Coordinate-wise maximum. On exact ties the first operand wins, both in
    /// the forward value and in gradient routing.
    pub fn elementwise_max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("elementwise_max", at, bt)?;
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Max(a, b), &[a, b]))
    }

    pub fn mean_over_axis(&mut self, t: Var, axis: usize) -> Result<Var> {
        let tt = self.value(t);
        if axis >= tt.rank() {
            return Err(Error::dim(format!(
                "mean_over_axis: axis {axis} out of range for shape {:?}",
                tt.shape()
            )));
        }
        let (outer, n, inner) = axis_extents(tt.shape(), axis);
        if n == 0 {
            return Err(Error::dim("mean_over_axis: empty axis"));
        }
        let src = tt.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        let denom = n as f64;
        out.iter_mut().for_each(|v| *v /= denom);
        let mut shape = tt.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Mean { input: t, axis }, &[t]))
    }

    pub fn tanh(&mut self, t: Var) -> Var {
        let tt = self.value(t);
        let data = tt.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(tt.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh(t), &[t])
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, t: Var) -> Result<Var> {
        let tt = self.value(t);
        check_finite("softmax", tt)?;
        let width = match tt.shape().last() {
            Some(&w) if w > 0 => w,
            _ => return Err(Error::dim("softmax: needs a non-empty last axis")),
        };
        let mut out = vec![0.0; tt.numel()];
        for (src, dst) in tt.data().chunks(width).zip(out.chunks_mut(width)) {
            stable_softmax(src, dst);
        }
        let value = Tensor::new(tt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(t), &[t]))
    }

    /// Mean cross-entropy of `[C]` or `[n, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len().max(1) as f64;
        self.cross_entropy_scaled(logits, labels, 1.0 / n)
    }

    /// `scale · Σ_i CE(logits_i, label_i)`; lets a worker contribute its share
    /// of a batch mean without rescaling afterwards.
    pub fn cross_entropy_scaled(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let lt = self.value(logits);
        check_finite("cross_entropy", lt)?;
        let (rows, classes) = match lt.shape() {
            [c] => (1, *c),
            [n, c] => (*n, *c),
            s => return Err(Error::dim(format!("cross_entropy: logits of shape {s:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for (i, z) in lt.data().chunks(classes).enumerate() {
            let lse = log_sum_exp(z);
            total += lse - z[labels[i]];
            stable_softmax(z, &mut probs[i * classes..(i + 1) * classes]);
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            scale,
            probs,
        };
        Ok(self.push(Tensor::scalar(scale * total), op, &[logits]))
    }

    /// Row lookup: `table[indices[j]]` stacked into a `[len, d]` tensor.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::dim(format!("gather: table of shape {:?}", tt.shape())));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim(format!("gather: row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// `out[j, k] = rows[j, k] · vector[k]`.
    pub fn row_mul(&mut self, rows: Var, vector: Var) -> Result<Var> {
        let (rt, vt) = (self.value(rows), self.value(vector));
        if rt.rank() != 2 || vt.rank() != 1 || rt.shape()[1] != vt.shape()[0] {
            return Err(Error::dim(format!(
                "row_mul: rows {:?} and vector {:?} do not conform",
                rt.shape(),
                vt.shape()
            )));
        }
        let d = vt.numel();
        let v = vt.data();
        let data = rt
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * v[i % d])
            .collect();
        let value = Tensor::new(rt.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RowMul { rows, vector }, &[rows, vector]))
    }

    /// `out[k] = Σ_j weights[j] · rows[j, k]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (wt, rt) = (self.value(weights), self.value(rows));
        if wt.rank() != 1 || rt.rank() != 2 || rt.shape()[0] != wt.shape()[0] {
            return Err(Error::dim(format!(
                "weighted_sum: weights {:?} and rows {:?} do not conform",
                wt.shape(),
                rt.shape()
            )));
        }
        let d = rt.shape()[1];
        let mut out = vec![0.0; d];
        for (j, &a) in wt.data().iter().enumerate() {
            for (o, &r) in out.iter_mut().zip(rt.row(j)) {
                *o += a * r;
            }
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::WeightedSum { weights, rows }, &[weights, rows]))
    }

    /// Stacks equally shaped rank-1 tensors into a `[n, d]` matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stack: no inputs"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::dim(format!("stack: part of shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(parts.len() * shape[0]);
        for p in parts {
            let pt = self.value(*p);
            if pt.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "stack: shapes {:?} and {:?} differ",
                    shape,
                    pt.shape()
                )));
            }
            data.extend_from_slice(pt.data());
        }
        let value = Tensor::new(vec![parts.len(), shape[0]], data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    /// Records an operation whose forward value was computed by the caller and
    /// whose backward rule is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(value, op, inputs)
    }

    /// Clears gradients so the graph can be differentiated again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Reverse sweep from a scalar `loss`. Gradients of shared subexpressions
    /// are summed; differentiable leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, found shape {:?}",
                lt.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.grads[i] = Some(upstream);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so input values can be read while
        // gradient buffers are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { w, b, x } => {
                let (c, d) = {
                    let s = self.value(*w).shape();
                    (s[0], s[1])
                };
                let n = g.len() / c;
                let wdata = self.value(*w).data().to_vec();
                let xdata = self.value(*x).data().to_vec();
                if let Some(dw) = self.acc(*w) {
                    for r in 0..n {
                        let xrow = &xdata[r * d..(r + 1) * d];
                        for k in 0..c {
                            let gk = g[r * c + k];
                            for (dst, xv) in dw[k * d..(k + 1) * d].iter_mut().zip(xrow) {
                                *dst += gk * xv;
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(*b) {
                    for r in 0..n {
                        add_into(db, &g[r * c..(r + 1) * c]);
                    }
                }
                if let Some(dx) = self.acc(*x) {
                    for r in 0..n {
                        for k in 0..c {
                            let gk = g[r * c + k];
                            let wrow = &wdata[k * d..(k + 1) * d];
                            for (dst, wv) in dx[r * d..(r + 1) * d].iter_mut().zip(wrow) {
                                *dst += gk * wv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(*b) {
                    add_into(db, g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(da) = self.acc(*a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(&bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.acc(*b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(&av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                if let Some(da) = self.acc(*a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * f);
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(da) = self.acc(*a) {
                    da.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Max(a, b) => {
                let mask: Vec<bool> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| x >= y)
                    .collect();
                if let Some(da) = self.acc(*a) {
                    for ((d, gi), &m) in da.iter_mut().zip(g).zip(&mask) {
                        if m {
                            *d += gi;
                        }
                    }
                }
                if let Some(db) = self.acc(*b) {
                    for ((d, gi), &m) in db.iter_mut().zip(g).zip(&mask) {
                        if !m {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mean { input, axis } => {
                let (outer, n, inner) = axis_extents(self.value(*input).shape(), *axis);
                let inv = 1.0 / n as f64;
                if let Some(dt) = self.acc(*input) {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for k in 0..inner {
                                dt[base + k] += g[o * inner + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::Tanh(t) => {
                let out = self.nodes[i].value.data().to_vec();
                if let Some(dt) = self.acc(*t) {
                    for ((d, gi), y) in dt.iter_mut().zip(g).zip(&out) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Softmax(t) => {
                let out = self.nodes[i].value.data().to_vec();
                let width = *self.nodes[i].value.shape().last().unwrap();
                if let Some(dt) = self.acc(*t) {
                    for ((yr, gr), dr) in out
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(dt.chunks_mut(width))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                        for ((d, y), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                scale,
                probs,
            } => {
                let coeff = g[0] * scale;
                let classes = probs.len() / labels.len();
                if let Some(dz) = self.acc(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &mut dz[r * classes..(r + 1) * classes];
                        for (k, (d, p)) in row
                            .iter_mut()
                            .zip(&probs[r * classes..(r + 1) * classes])
                            .enumerate()
                        {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            *d += coeff * (p - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = self.acc(*table) {
                    for (j, &row) in indices.iter().enumerate() {
                        add_into(&mut dt[row * d..(row + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::RowMul { rows, vector } => {
                let rv = self.value(*rows).data().to_vec();
                let vv = self.value(*vector).data().to_vec();
                let d = vv.len();
                if let Some(dr) = self.acc(*rows) {
                    for (idx, (dst, gi)) in dr.iter_mut().zip(g).enumerate() {
                        *dst += gi * vv[idx % d];
                    }
                }
                if let Some(dv) = self.acc(*vector) {
                    for (idx, (gi, r)) in g.iter().zip(&rv).enumerate() {
                        dv[idx % d] += gi * r;
                    }
                }
            }
            Op::WeightedSum { weights, rows } => {
                let wv = self.value(*weights).data().to_vec();
                let rt = self.value(*rows);
                let d = rt.shape()[1];
                let rv = rt.data().to_vec();
                if let Some(dw) = self.acc(*weights) {
                    for (j, dst) in dw.iter_mut().enumerate() {
                        *dst += rv[j * d..(j + 1) * d]
                            .iter()
                            .zip(g)
                            .map(|(r, gi)| r * gi)
                            .sum::<f64>();
                    }
                }
                if let Some(dr) = self.acc(*rows) {
                    for (j, a) in wv.iter().enumerate() {
                        for (dst, gi) in dr[j * d..(j + 1) * d].iter_mut().zip(g) {
                            *dst += a * gi;
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                let d = g.len() / parts.len();
                for (j, p) in parts.iter().enumerate() {
                    if let Some(dp) = self.acc(*p) {
                        add_into(dp, &g[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let input_grads = {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    backward(&values, g)
                };
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(dst) = self.acc(*v) {
                        add_into(dst, &ig);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_identity_and_hand_arithmetic() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.linear(w, b, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let w = g.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.linear(w, b, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(vec![3, 2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let x = g.constant(Tensor::zeros(vec![4]));
        let msg = g.linear(w, b, x).unwrap_err().to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn max_routes_ties_to_first_operand() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![1.0, -2.0, 3.0]));
        let b = g.param(&Tensor::vector(vec![0.0, 5.0, 3.0]));
        let m = g.elementwise_max(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 5.0, 3.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_of_equal_inputs_sends_everything_to_a() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![0.5, -1.0]));
        let b = g.param(&Tensor::vector(vec![0.5, -1.0]));
        let m = g.elementwise_max(a, b).unwrap();
        assert_eq!(g.value(m).data(), g.value(a).data());
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_over_axis_cases() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::matrix(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap());
        let m = g.mean_over_axis(t, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 2.0]);
        let single = g.constant(Tensor::matrix(&[vec![7.0, -1.5]]).unwrap());
        let m = g.mean_over_axis(single, 0).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, -1.5]);
        assert!(g.mean_over_axis(t, 2).is_err());
    }

    #[test]
    fn tanh_values() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = g.tanh(t);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 0.76159).abs() < 5e-6);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(t).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let t = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(t).unwrap();
        assert!(close(g.value(y).data(), &[0.09003, 0.24473, 0.66524], 5e-6));
        let t = g.constant(Tensor::vector(vec![-4.2]));
        let y = g.softmax(t).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let t = g.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert!(matches!(g.softmax(t), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![7]));
        let l = g.cross_entropy(z, &[3]).unwrap();
        assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-15);

        let mut g = Graph::new();
        let z = g.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).item().unwrap() - 0.40761).abs() < 5e-6);
        g.backward(l).unwrap();
        // closed form: softmax(z) − onehot(2), evaluated independently
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let expected = [e[0] / s, e[1] / s, e[2] / s - 1.0];
        assert!(close(g.grad(z).unwrap(), &expected, 1e-12));

        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.cross_entropy(z, &[2]), Err(Error::Label { .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let f = |v: f64| v * v;
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        let fd = (f(3.001) - f(2.999)) / 0.002;
        assert!((fd - 6.0).abs() < 1e-9);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(&Tensor::vector(vec![5.0]));
        let c = g.constant(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(x) = g(x) + g(x) with g(x) = sum(tanh(x))
        let xs = vec![0.3, -1.2, 2.0];
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(xs.clone()));
        let t = g.tanh(x);
        let gx = g.sum(t);
        let f = g.add(gx, gx).unwrap();
        g.backward(f).unwrap();
        let expected: Vec<f64> = xs.iter().map(|v| 2.0 * (1.0 - v.tanh().powi(2))).collect();
        assert!(close(g.grad(x).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn gather_scatters_into_table() {
        let mut g = Graph::new();
        let table = g.param(&Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let rows = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather(table, &[3]).is_err());
    }
}
