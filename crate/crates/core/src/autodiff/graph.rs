//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse, accumulating adjoints into a [`Gradients`] table.
//!
//! Only nodes that (transitively) depend on a leaf created with
//! [`Graph::input`] or [`Graph::param`] carry gradients; constants are
//! skipped during the backward sweep.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid_arg, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferKind {
    /// Euclidean nearest-neighbour distances.
    L1,
    /// Squared Euclidean nearest-neighbour distances.
    L2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    MaxAxis { x: Var, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Sum(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    RadialTanh { x: Var, radius: f64 },
    Chamfer { a: Var, b: Var, kind: ChamferKind, a_to_b: Vec<usize>, b_to_a: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-threaded computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    invalid_arg(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store` as a gradient-carrying leaf.
    /// Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return shape_err("matmul", av.shape(), bv.shape());
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng))
    }

    /// Elementwise sum of equal shapes, or a row-broadcast add when `b` is a
    /// single row whose width matches the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let shape = av.shape().to_vec();
            return Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), ng));
        }
        if bv.rows() == 1 && bv.cols() == av.cols() {
            let c = av.cols();
            let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % c]).collect();
            let shape = av.shape().to_vec();
            return Ok(self.push(Tensor::from_parts(shape, data), Op::AddRowBias(a, b), ng));
        }
        shape_err("add", av.shape(), bv.shape())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("sub", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("elementwise_mul", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Absolute value with subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Concatenation along the last axis. All parts must share leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid_arg("concat of zero tensors");
        };
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return shape_err("concat", self.value(first).shape(), s);
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), ng))
    }

    /// Stacks rank-2 tensors of equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid_arg("concat_rows of zero tensors");
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != c {
                return shape_err("concat_rows", self.value(first).shape(), v.shape());
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return invalid_arg(format!("axis {axis} out of range for shape {shape:?}"));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Maximum over `axis`; ties route to the smallest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = Self::axis_split(xv.shape(), axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = d[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    if l == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = l;
                    }
                }
            }
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis { x, outer, len, inner, argmax }, ng))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = Self::axis_split(xv.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let shape = Self::reduced_shape(xv.shape(), axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, outer, len, inner }, ng))
    }

    /// Sum of all entries, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), ng))
    }

    /// Layer normalisation over the last axis with learned gain and bias
    /// (both single rows of the normalised width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return shape_err("layer_norm", xv.shape(), gv.shape());
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = xv.row(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (src[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Row gather: output row `i` is row `index[i]` of `x` viewed as a
    /// matrix. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        if index.is_empty() {
            return invalid_arg("gather_rows with empty index");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return invalid_arg(format!("gather_rows index {bad} out of range for {rows} rows"));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], data),
            Op::GatherRows { x, index: index.to_vec() },
            ng,
        ))
    }

    /// Rows `start..end` of `x` viewed as a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end {
            return invalid_arg(format!("empty row slice {start}..{end}"));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return invalid_arg(format!("transpose needs rank 2, got {:?}", xv.shape()));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), ng))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c {
            return invalid_arg(format!("slice {start}..{end} out of range for width {c}"));
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceCols { x, start }, ng))
    }

    /// Radial squash of each last-axis row: `radius * x * tanh(|x|) / |x|`.
    /// Output rows have norm strictly below `radius`.
    pub fn radial_tanh(&mut self, x: Var, radius: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = tanh_ratio(s);
            data.extend(row.iter().map(|v| radius * f * v));
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::RadialTanh { x, radius }, ng)
    }

    /// Two-sided Chamfer distance between row sets `a` and `b` (rows are
    /// points). Nearest-neighbour ties resolve to the smaller index.
    pub fn chamfer(&mut self, a: Var, b: Var, kind: ChamferKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return shape_err("chamfer", av.shape(), bv.shape());
        }
        let c = av.cols();
        let (a_to_b, da) = nearest_rows(av.data(), bv.data(), c);
        let (b_to_a, db) = nearest_rows(bv.data(), av.data(), c);
        let term = |d2: &[f64]| -> f64 {
            let s: f64 = match kind {
                ChamferKind::L1 => d2.iter().map(|v| v.sqrt()).sum(),
                ChamferKind::L2 => d2.iter().sum(),
            };
            s / d2.len() as f64
        };
        let value = term(&da) + term(&db);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(value), Op::Chamfer { a, b, kind, a_to_b, b_to_a }, ng))
    }

    /// Reverse sweep from a scalar `loss`, seeding its adjoint with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid_arg(format!("backward needs a scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRowBias(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let c = gb.len();
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if av[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += s * g[i];
                    }
                });
            }
            Op::MaxAxis { x, outer, len, inner, argmax } => acc(*x, &mut |gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let slot = o * inner + i;
                        gx[(o * len + argmax[slot]) * inner + i] += g[slot];
                    }
                }
            }),
            Op::MeanAxis { x, outer, len, inner } => acc(*x, &mut |gx| {
                let w = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + l) * inner + i] += w * g[o * inner + i];
                        }
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * c..(r + 1) * c]);
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = g[r * c + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = g[r * c + j] * gv[j];
                            gx[r * c + j] += inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = val(*x).cols();
                acc(*x, &mut |gx| {
                    for r in 0..node.value.rows() {
                        add_into(&mut gx[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::RadialTanh { x, radius } => {
                let xv = val(*x);
                let c = xv.cols();
                acc(*x, &mut |gx| {
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let f = tanh_ratio(s);
                        // d(f(s) x)/dx = f I + (f'(s)/s) x xᵀ
                        let fp_over_s = tanh_ratio_deriv_over_s(s);
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += radius * (f * gr[j] + fp_over_s * row[j] * dot);
                        }
                    }
                });
            }
            Op::Chamfer { a, b, kind, a_to_b, b_to_a } => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.cols();
                let g0 = g[0];
                // Each directed term contributes to both the source point and
                // its matched nearest point.
                let mut ga_buf = vec![0.0; av.len()];
                let mut gb_buf = vec![0.0; bv.len()];
                directed_chamfer_grad(av.data(), bv.data(), a_to_b, c, *kind, g0, &mut ga_buf, &mut gb_buf);
                directed_chamfer_grad(bv.data(), av.data(), b_to_a, c, *kind, g0, &mut gb_buf, &mut ga_buf);
                acc(*a, &mut |ga| add_into(ga, &ga_buf));
                acc(*b, &mut |gb| add_into(gb, &gb_buf));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh(s) / s, continuous at 0.
fn tanh_ratio(s: f64) -> f64 {
    if s < 1e-4 {
        1.0 - s * s / 3.0
    } else {
        s.tanh() / s
    }
}

/// d/ds [tanh(s)/s] divided by s, continuous at 0.
fn tanh_ratio_deriv_over_s(s: f64) -> f64 {
    if s < 1e-4 {
        -2.0 / 3.0 + 8.0 * s * s / 15.0
    } else {
        let t = s.tanh();
        ((1.0 - t * t) * s - t) / (s * s * s)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
}

/// For each row of `src`, index of and squared distance to the nearest row
/// of `dst`; ties go to the smaller index.
fn nearest_rows(src: &[f64], dst: &[f64], c: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(src.len() / c);
    let mut d2s = Vec::with_capacity(src.len() / c);
    for s in src.chunks_exact(c) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, t) in dst.chunks_exact(c).enumerate() {
            let d: f64 = s.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        idx.push(best);
        d2s.push(best_d);
    }
    (idx, d2s)
}

#[allow(clippy::too_many_arguments)]
fn directed_chamfer_grad(
    src: &[f64],
    dst: &[f64],
    matches: &[usize],
    c: usize,
    kind: ChamferKind,
    upstream: f64,
    g_src: &mut [f64],
    g_dst: &mut [f64],
) {
    let n = matches.len() as f64;
    for (i, &j) in matches.iter().enumerate() {
        let s = &src[i * c..(i + 1) * c];
        let t = &dst[j * c..(j + 1) * c];
        let coef = match kind {
            ChamferKind::L2 => 2.0,
            ChamferKind::L1 => {
                let d = s.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                if d == 0.0 {
                    continue;
                }
                1.0 / d
            }
        } * upstream
            / n;
        for a in 0..c {
            let diff = coef * (s[a] - t[a]);
            g_src[i * c + a] += diff;
            g_dst[j * c + a] -= diff;
        }
    }
}
