use super::{
    gelu, gelu_grad, gemm, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus, split_axis, Tensor,
};
use crate::error::{GraspError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MulScalar(usize, usize),
    AddScalar(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Gelu(usize),
    Softplus(usize),
    Softmax { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    BlendRows { a: usize, b: usize, s: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in creation order and only ever reference earlier
/// nodes, so reverse index order is a valid topological order. Ops whose
/// inputs carry no gradient are stored as constants.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GraspError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(GraspError::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x).map(|v| v * c);
        self.push(t, Op::Scale(x.0, c), &[x.0])
    }

    /// Addition of a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x).map(|v| v + c);
        self.push(t, Op::Shift(x.0), &[x.0])
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.val(s);
        if !is_scalar(ts) {
            return Err(GraspError::dim(
                "mul_scalar",
                self.val(x).shape(),
                ts.shape(),
            ));
        }
        let c = ts.item();
        let t = self.val(x).map(|v| v * c);
        Ok(self.push(t, Op::MulScalar(x.0, s.0), &[x.0, s.0]))
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.val(s);
        if !is_scalar(ts) {
            return Err(GraspError::dim(
                "add_scalar",
                self.val(x).shape(),
                ts.shape(),
            ));
        }
        let c = ts.item();
        let t = self.val(x).map(|v| v + c);
        Ok(self.push(t, Op::AddScalar(x.0, s.0), &[x.0, s.0]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.val(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.val(x).map(f64::tanh);
        self.push(t, Op::Tanh(x.0), &[x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(gelu);
        self.push(t, Op::Gelu(x.0), &[x.0])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.val(x).map(softplus);
        self.push(t, Op::Softplus(x.0), &[x.0])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.val(x);
        if axis >= tx.rank() {
            return Err(GraspError::Invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .val(
                *parts
                    .first()
                    .ok_or_else(|| GraspError::Invalid("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(GraspError::Invalid(format!(
                "concat axis {axis} out of range"
            )));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.val(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(GraspError::dim("concat", &first, s));
            }
            extent += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.val(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            t,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// The sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(GraspError::Invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let (r, c) = tx.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.val(x).sum());
        self.push(t, Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let t = Tensor::scalar(tx.sum() / tx.numel() as f64);
        self.push(t, Op::Mean(x.0), &[x.0])
    }

    /// `x[m×n] + b[n]` with `b` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        let (m, n) = tx.dims2()?;
        if tb.shape() != [n] {
            return Err(GraspError::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::AddRow(x.0, b.0), &[x.0, b.0]))
    }

    /// `x[m×n]` with row `i` multiplied by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.val(x), self.val(s));
        let (m, n) = tx.dims2()?;
        if ts.shape() != [m] {
            return Err(GraspError::dim("scale_rows", tx.shape(), ts.shape()));
        }
        let mut out = tx.data().to_vec();
        for (row, &sv) in out.chunks_mut(n).zip(ts.data()) {
            row.iter_mut().for_each(|o| *o *= sv);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ScaleRows(x.0, s.0), &[x.0, s.0]))
    }

    /// Per-row interpolation `a + s[i]·(b − a)`, evaluated as
    /// `(1 − s[i])·a + s[i]·b` so that `s = 0` returns `a` and `s = 1`
    /// returns `b` bit for bit.
    pub fn blend_rows(&mut self, a: Var, b: Var, s: Var) -> Result<Var> {
        let (ta, tb, ts) = (self.val(a), self.val(b), self.val(s));
        same_shape("blend_rows", ta, tb)?;
        let (m, n) = ta.dims2()?;
        if ts.shape() != [m] {
            return Err(GraspError::dim("blend_rows", ta.shape(), ts.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let sv = ts.data()[i];
            let (ra, rb) = (ta.row(i), tb.row(i));
            if sv == 0.0 {
                out.extend_from_slice(ra);
            } else if sv == 1.0 {
                out.extend_from_slice(rb);
            } else {
                out.extend(ra.iter().zip(rb).map(|(&x, &y)| (1.0 - sv) * x + sv * y));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::BlendRows {
                a: a.0,
                b: b.0,
                s: s.0,
            },
            &[a.0, b.0, s.0],
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !is_scalar(&root.value) {
            return Err(GraspError::dim("backward", root.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let v = |id: usize| &self.nodes[id].value;
        let add_into =
            |dst: &mut [f64], c: f64| dst.iter_mut().zip(gd).for_each(|(d, &x)| *d += c * x);

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (v(a).shape()[0], v(a).shape()[1]);
                let n = v(b).shape()[1];
                self.accumulate(grads, a, |d| gemm_nt_acc(gd, v(b).data(), d, m, k, n));
                self.accumulate(grads, b, |d| gemm_tn_acc(v(a).data(), gd, d, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, 1.0));
                self.accumulate(grads, b, |d| add_into(d, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, 1.0));
                self.accumulate(grads, b, |d| add_into(d, -1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(gd).zip(v(b).data()) {
                        *d += x * y;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(gd).zip(v(a).data()) {
                        *d += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                self.accumulate(grads, a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(gd).zip(v(b).data()) {
                        *d += x / y;
                    }
                });
                self.accumulate(grads, b, |d| {
                    let (na, nb) = (v(a).data(), v(b).data());
                    for (i, d) in d.iter_mut().enumerate() {
                        *d -= gd[i] * na[i] / (nb[i] * nb[i]);
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, x, |d| add_into(d, c)),
            Op::Shift(x) | Op::Reshape(x) => self.accumulate(grads, x, |d| add_into(d, 1.0)),
            Op::MulScalar(x, s) => {
                let c = v(s).item();
                self.accumulate(grads, x, |d| add_into(d, c));
                let dot: f64 = gd.iter().zip(v(x).data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, s, |d| d[0] += dot);
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, x, |d| add_into(d, 1.0));
                let total: f64 = gd.iter().sum();
                self.accumulate(grads, s, |d| d[0] += total);
            }
            Op::Sigmoid(x) => self.accumulate(grads, x, |d| {
                for ((d, &gv), &y) in d.iter_mut().zip(gd).zip(node.value.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => self.accumulate(grads, x, |d| {
                for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(v(x).data()) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, x, |d| {
                for ((d, &gv), &y) in d.iter_mut().zip(gd).zip(node.value.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Gelu(x) => self.accumulate(grads, x, |d| {
                for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(v(x).data()) {
                    *d += gv * gelu_grad(xv);
                }
            }),
            Op::Softplus(x) => self.accumulate(grads, x, |d| {
                for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(v(x).data()) {
                    *d += gv * sigmoid(xv);
                }
            }),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                self.accumulate(grads, x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { ref parts, axis } => {
                let (outer, extent, inner) = split_axis(node.value.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let len = v(p).shape()[axis];
                    self.accumulate(grads, p, |d| {
                        for o in 0..outer {
                            let src = (o * extent + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                d[dst + t] += gd[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(v(x).shape(), axis);
                let len = node.value.shape()[axis];
                self.accumulate(grads, x, |d| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            d[dst + t] += gd[src + t];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                self.accumulate(grads, x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, x, |d| d.iter_mut().for_each(|e| *e += gd[0])),
            Op::Mean(x) => {
                let c = gd[0] / v(x).numel() as f64;
                self.accumulate(grads, x, |d| d.iter_mut().for_each(|e| *e += c));
            }
            Op::AddRow(x, b) => {
                let n = v(b).numel();
                self.accumulate(grads, x, |d| add_into(d, 1.0));
                self.accumulate(grads, b, |d| {
                    for row in gd.chunks(n) {
                        for (e, &gv) in d.iter_mut().zip(row) {
                            *e += gv;
                        }
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let n = v(x).shape()[1];
                let (sx, ss) = (v(x).data(), v(s).data());
                self.accumulate(grads, x, |d| {
                    for (i, e) in d.iter_mut().enumerate() {
                        *e += gd[i] * ss[i / n];
                    }
                });
                self.accumulate(grads, s, |d| {
                    for (i, e) in d.iter_mut().enumerate() {
                        *e += (0..n).map(|j| gd[i * n + j] * sx[i * n + j]).sum::<f64>();
                    }
                });
            }
            Op::BlendRows { a, b, s } => {
                let n = v(a).shape()[1];
                let (da, db, ss) = (v(a).data(), v(b).data(), v(s).data());
                self.accumulate(grads, a, |d| {
                    for (i, e) in d.iter_mut().enumerate() {
                        *e += gd[i] * (1.0 - ss[i / n]);
                    }
                });
                self.accumulate(grads, b, |d| {
                    for (i, e) in d.iter_mut().enumerate() {
                        *e += gd[i] * ss[i / n];
                    }
                });
                self.accumulate(grads, s, |d| {
                    for (i, e) in d.iter_mut().enumerate() {
                        *e += (0..n)
                            .map(|j| gd[i * n + j] * (db[i * n + j] - da[i * n + j]))
                            .sum::<f64>();
                    }
                });
            }
        }
    }
}
