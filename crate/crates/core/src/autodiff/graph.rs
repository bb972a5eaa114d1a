//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Node indices are a
//! topological order by construction, so `backward` is a single reverse sweep.

use rand::Rng;

use super::tensor::{Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulMask(Var, Vec<f64>),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations as they execute and replays them backwards.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf initialised from a parameter tensor.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present iff the node requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(a).last_dim();
        if self.value(bias).shape() != [n] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, bb) in row.iter_mut().zip(&b) {
                *x += bb;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(value, Op::MulMask(a, mask), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| {
            let u = GELU_C * (*x + GELU_A * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        });
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let input = self.value(x);
        if !input.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let shape = input.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = input.clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |t: usize| base + t * inner;
                let max = (0..len).map(|t| data[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (data[idx(t)] - max).exp();
                    data[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    data[idx(t)] /= total;
                }
            }
        }
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Row softmax of an `[m, n]` score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2("causal_softmax")?;
        let input = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let visible = (i + 1).min(n);
            let row = &input.data()[i * n..i * n + visible];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "causal_softmax",
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..i * n + visible];
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::CausalSoftmax(x), &[x]))
    }

    /// Normalises each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("last dimension must be >= 2, got {d}"),
            });
        }
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let input = self.value(x);
        let rows = input.numel() / d;
        let mut xhat = vec![0.0; input.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; input.numel()];
        for r in 0..rows {
            let row = &input.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "no rows selected".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let value = Tensor::new(vec![indices.len(), n], out)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} invalid for {n} columns"),
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![m, w], out)?;
        Ok(self.push(value, Op::SliceCols(x, start, end), &[x]))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// requires-grad node's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut finished: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            propagate(&self.nodes, node, &dy, &mut adj);
            finished.push((i, dy));
        }
        for (i, dy) in finished {
            if let Some(g) = self.nodes[i].grad.as_mut() {
                for (a, d) in g.iter_mut().zip(&dy) {
                    *a += d;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2("matmul").unwrap();
            let n = val(*b).shape()[1];
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, adj, *a, |da| {
                // dA += dC · Bᵀ
                for i in 0..m {
                    let drow = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += dot(drow, brow);
                    }
                }
            });
            accumulate(nodes, adj, *b, |db| {
                // dB += Aᵀ · dC
                for i in 0..m {
                    let drow = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let dst = &mut db[p * n..(p + 1) * n];
                        for (d, g) in dst.iter_mut().zip(drow) {
                            *d += a_ip * g;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2("transpose").unwrap();
            accumulate(nodes, adj, *a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dy[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, adj, *a, |da| add_into(da, dy));
            accumulate(nodes, adj, *b, |db| add_into(db, dy));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, adj, *a, |da| add_into(da, dy));
            accumulate(nodes, adj, *b, |db| {
                for (d, g) in db.iter_mut().zip(dy) {
                    *d -= g;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, adj, *a, |da| {
                for ((d, g), y) in da.iter_mut().zip(dy).zip(bv) {
                    *d += g * y;
                }
            });
            accumulate(nodes, adj, *b, |db| {
                for ((d, g), x) in db.iter_mut().zip(dy).zip(av) {
                    *d += g * x;
                }
            });
        }
        Op::AddBias(a, bias) => {
            let n = val(*bias).numel();
            accumulate(nodes, adj, *a, |da| add_into(da, dy));
            accumulate(nodes, adj, *bias, |db| {
                for row in dy.chunks(n) {
                    add_into(db, row);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, adj, *a, |da| {
                for (d, g) in da.iter_mut().zip(dy) {
                    *d += c * g;
                }
            });
        }
        Op::MulMask(a, mask) => {
            accumulate(nodes, adj, *a, |da| {
                for ((d, g), m) in da.iter_mut().zip(dy).zip(mask) {
                    *d += g * m;
                }
            });
        }
        Op::Gelu(a) => {
            let xs = val(*a).data();
            accumulate(nodes, adj, *a, |da| {
                for ((d, g), &x) in da.iter_mut().zip(dy).zip(xs) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            let (outer, len, inner) = (*outer, *len, *inner);
            accumulate(nodes, adj, *x, |dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dotp: f64 = (0..len)
                            .map(|t| y[base + t * inner] * dy[base + t * inner])
                            .sum();
                        for t in 0..len {
                            let j = base + t * inner;
                            dx[j] += y[j] * (dy[j] - dotp);
                        }
                    }
                }
            });
        }
        Op::CausalSoftmax(x) => {
            let y = node.value.data();
            let (m, n) = node.value.dims2("causal_softmax").unwrap();
            accumulate(nodes, adj, *x, |dx| {
                for i in 0..m {
                    let visible = (i + 1).min(n);
                    let r = i * n..i * n + visible;
                    let dotp = dot(&y[r.clone()], &dy[r.clone()]);
                    for j in r {
                        dx[j] += y[j] * (dy[j] - dotp);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = val(*gain).numel();
            let g = val(*gain).data();
            accumulate(nodes, adj, *x, |dx| {
                for (r, &is) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let dyr = &dy[rows.clone()];
                    let xh = &xhat[rows.clone()];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for j in 0..d {
                        let dh = dyr[j] * g[j];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_xh /= d as f64;
                    for j in 0..d {
                        let dh = dyr[j] * g[j];
                        dx[r * d + j] += is * (dh - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
            });
            accumulate(nodes, adj, *gain, |dg| {
                for (row_dy, row_xh) in dy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += row_dy[j] * row_xh[j];
                    }
                }
            });
            accumulate(nodes, adj, *bias, |db| {
                for row in dy.chunks(d) {
                    add_into(db, row);
                }
            });
        }
        Op::GatherRows(x, indices) => {
            let n = val(*x).last_dim();
            accumulate(nodes, adj, *x, |dx| {
                for (k, &i) in indices.iter().enumerate() {
                    add_into(&mut dx[i * n..(i + 1) * n], &dy[k * n..(k + 1) * n]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                accumulate(nodes, adj, p, |dp| add_into(dp, &dy[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceCols(x, start, end) => {
            let n = val(*x).last_dim();
            let w = end - start;
            accumulate(nodes, adj, *x, |dx| {
                for (r, row) in dy.chunks(w).enumerate() {
                    add_into(&mut dx[r * n + start..r * n + end], row);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.last_dim();
            let mut offset = 0;
            for &p in parts {
                let (m, w) = val(p).dims2("concat_cols").unwrap();
                accumulate(nodes, adj, p, |dp| {
                    for r in 0..m {
                        let src = &dy[r * total + offset..r * total + offset + w];
                        add_into(&mut dp[r * w..(r + 1) * w], src);
                    }
                });
                offset += w;
            }
        }
        Op::Sum(x) => {
            accumulate(nodes, adj, *x, |dx| dx.iter_mut().for_each(|d| *d += dy[0]));
        }
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            accumulate(nodes, adj, *x, |dx| dx.iter_mut().for_each(|d| *d += dy[0] / n));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (d, bv) in dst.iter_mut().zip(brow) {
                *d += a_ip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = g.matmul(p, b).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut g = Graph::new();
        let a = g.leaf(t2(&[&[1.0, 1.0]]), true);
        let b = g.constant(t2(&[&[2.0], &[3.0]]));
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 3.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);

        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for (got, want) in d.iter().zip([0.045278, 0.045278, 0.909444]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(
            g.softmax(x, 0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.0, 1.0], &[0.0, 3.0]]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
        assert!(d[3] > d[1]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 5.0, 9.0], &[0.0, 0.0, 7.0], &[1.0, 2.0, 3.0]]));
        let y = g.causal_softmax(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
        assert!((d[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t2(&[&[1.0, 1.0, 1.0, 1.0]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t2(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[1], 1.0));
        let bias = g.constant(Tensor::zeros(&[1]));
        let x = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.layer_norm(x, gain, bias).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert_eq!(
            g.backward(x),
            Err(TensorError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::new();
        let mut rng = rand::thread_rng();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
    }

    #[test]
    fn dropout_preserves_expectation_scale() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[20_000], 1.0));
        let y = g.dropout(x, 0.25, &mut rng);
        let d = g.value(y).data();
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
