//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every forward operation as a node. Values live on the
//! tape and are addressed through copyable [`Var`] handles. Parameters enter
//! the tape as leaves through [`Tape::bind`]; after [`Tape::backward`] their
//! gradients are accumulated into the owning [`ParamSet`].
//!
//! Nodes that do not depend on any gradient-requiring leaf are never visited
//! during the backward sweep, so a frozen encoder costs nothing there.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    SmoothL1(Var, f64),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf; it requires grad iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_node(t, Op::Leaf, needs_grad, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t.with_requires_grad(false), Op::Leaf, false, None)
    }

    /// Binds every parameter of `params` as a leaf. Frozen parameters become
    /// constants. The returned vector is indexed by parameter id.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .iter()
            .enumerate()
            .map(|(id, p)| {
                let mut value = p.tensor.clone();
                value.clear_grad();
                self.push_node(value, Op::Leaf, p.trainable, Some(id))
            })
            .collect()
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op, needs_grad, None))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?} inner dimensions disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = mm(self.data(a), self.data(b), m, k, n);
        self.push_op(&[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`, the row-major form of applying a `[d_out×d_in]` weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: {:?} x {:?}ᵀ inner dimensions disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = mm_nt(self.data(a), self.data(b), m, k, n);
        self.push_op(&[m, n], out, Op::MatMulNt(a, b), &[a, b])
    }

    /// Adds a rank-1 bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        if self.shape(bias) != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let out: Vec<f64> =
            self.data(x).chunks(n).flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::AddBias(x, bias), &[x, bias])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Elementwise smooth-L1 (Huber) with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::Contract(format!("smooth_l1 beta must be positive, got {beta}")));
        }
        self.unary(
            x,
            |v| if v.abs() < beta { 0.5 * v * v / beta } else { v.abs() - 0.5 * beta },
            Op::SmoothL1(x, beta),
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        self.push_op(&shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{n}] for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push_op(&shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Gathers rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Input("embedding: empty id list".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("embedding: id {bad} out of vocabulary size {vocab}")));
        }
        let t = self.data(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        self.push_op(&[ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        let out = self.data(x).chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.push_op(&[m, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat_rows: no inputs".into()))?;
        let (_, n) = self.dims2(*first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::Dimension(format!("concat_rows: column counts {n} and {c} differ")));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        self.push_op(&[rows, n], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat_cols: no inputs".into()))?;
        let (m, _) = self.dims2(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::Dimension(format!("concat_cols: row counts {m} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        self.push_op(&[m, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column means of `x[m×n]`, shape `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push_op(&[1, n], out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push_op(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push_op(&[1], vec![s], Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`, returning leaf gradients.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("backward called on a tensor with no recorded graph".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if node.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and accumulates gradients into every bound
    /// trainable parameter. Trainable parameters that the loss does not reach
    /// receive an explicit zero gradient. Parameter data is never written.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Some(id) = node.param else { continue };
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.grads[i].as_deref() {
                p.tensor.accumulate_grad(g);
            }
        }
        for p in params.iter_mut().filter(|p| p.trainable && p.tensor.grad().is_none()) {
            let zeros = vec![0.0; p.numel()];
            p.tensor.accumulate_grad(&zeros);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if needs(a) {
                    acc(a, mm_nt(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, mm_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                if needs(a) {
                    acc(a, mm(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, mm_tn(g, val(a), m, n, k));
                }
            }
            &Op::AddBias(x, b) => {
                acc(x, g.to_vec());
                if needs(b) {
                    let n = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Div(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g / y).collect());
                }
                if needs(b) {
                    let d = g.iter().zip(val(a)).zip(val(b)).map(|((g, x), y)| -g * x / (y * y));
                    acc(b, d.collect());
                }
            }
            &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
                let pick_a: Vec<bool> = if matches!(node.op, Op::Minimum(..)) {
                    val(a).iter().zip(val(b)).map(|(x, y)| x <= y).collect()
                } else {
                    val(a).iter().zip(val(b)).map(|(x, y)| x >= y).collect()
                };
                acc(a, g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect());
                acc(b, g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect());
            }
            &Op::Scale(x, s) => acc(x, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar(x) => acc(x, g.to_vec()),
            &Op::Gelu(x) => acc(x, g.iter().zip(val(x)).map(|(g, &v)| g * gelu_grad(v)).collect()),
            &Op::Sigmoid(x) => acc(x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            &Op::Relu(x) => {
                acc(x, g.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())
            }
            &Op::SmoothL1(x, beta) => {
                let d = g.iter().zip(val(x)).map(|(g, &v)| {
                    if v.abs() < beta {
                        g * v / beta
                    } else {
                        g * v.signum()
                    }
                });
                acc(x, d.collect());
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                if needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; n];
                    for grow in g.chunks(n) {
                        db.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                    acc(*beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gm[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hrow).map(|(d, h)| d * h).sum();
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] / nf * (nf * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = self.nodes[p.0].value.dims2().unwrap();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    acc(p, dp);
                    col += w;
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                let dx = (0..m * n).map(|i| g[i % n] / m as f64).collect();
                acc(x, dx);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.nodes[x.0].value.numel()]),
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, shape `[k×n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}
