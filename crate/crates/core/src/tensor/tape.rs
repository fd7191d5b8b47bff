//! Linear Wengert tape. Operations are appended in execution order and
//! replayed in reverse by [`Tape::backward`].

use std::collections::HashMap;

use super::kernels::{axis_split, broadcast_index, gemm_nt_acc, gemm_tn_acc, layer_norm_forward};
use super::{ParamStore, Precision, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as a negative control for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// tanh backward uses `1 - y` instead of `1 - y²`.
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    BroadcastAdd(Var, Var),
    BroadcastMul(Var, Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { x: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    bound: HashMap<String, Var>,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            bound: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.round_to(self.precision);
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Tracks gradients when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.detached(), Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter from `store`, once per tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |p, q| p - q)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.map(x, |v| v * factor);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        let needs = self.needs(&[x]);
        self.push(out, Op::AddScalar(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        let needs = self.needs(&[x]);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split("concat", &base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(TensorError::DimensionMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("slice", &shape, axis)?;
        if start >= end || end > len {
            return Err(TensorError::SliceOutOfRange {
                op: "slice",
                start,
                end,
                extent: len,
            });
        }
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("sum_axis", &shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SumAxis { x, axis }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Max along `axis` (extent kept as 1). Gradient goes to the first maximal index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("max_axis", &shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let v = src[(o * len + k) * inner + i];
                    if v > data[o * inner + i] {
                        data[o * inner + i] = v;
                        argmax[o * inner + i] = k;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MaxAxis { x, axis, argmax }, needs))
    }

    /// `a + b` where `b` is the same shape, a `1×n` row, an `m×1` column or one element.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_index("broadcast_add", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().enumerate().map(|(i, v)| v + y.data()[map(i)]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::BroadcastAdd(a, b), needs))
    }

    /// `a ⊙ b` with the same broadcasting rules as [`Tape::broadcast_add`].
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_index("broadcast_mul", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().enumerate().map(|(i, v)| v * y.data()[map(i)]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::BroadcastMul(a, b), needs))
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut data = t.data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, needs))
    }

    /// Rows of a rank-2 tensor selected by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = match t.shape() {
            [m, n] => (*m, *n),
            other => {
                return Err(TensorError::RankUnsupported {
                    op: "gather_rows",
                    shape: other.to_vec(),
                })
            }
        };
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::SliceOutOfRange {
                    op: "gather_rows",
                    start: i,
                    end: i + 1,
                    extent: m,
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows { x, indices: indices.to_vec() }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            precision: self.precision,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(g, bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(av.data(), g, &mut db, k, m, n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(p, q)| p * q).collect());
                acc(*b, g.iter().zip(av).map(|(p, q)| p * q).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Tanh(x) => {
                let d: Vec<f64> = match self.fault {
                    Some(BackwardFault::Tanh) => g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv)).collect(),
                    None => g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                };
                acc(*x, d);
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, g.iter().zip(xv).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split("softmax", node.value.shape(), *axis).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = y.len() / n;
                let mut dx = vec![0.0; y.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..rows {
                    let range = r * n..(r + 1) * n;
                    let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split("concat", shape, *axis).unwrap();
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    acc(*v, d);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, len, inner) = axis_split("slice", src_shape, *axis).unwrap();
                let width = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    dx[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g[i * n + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split("sum_axis", self.shape(*x), *axis).unwrap();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = axis_split("max_axis", self.shape(*x), *axis).unwrap();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        dx[(o * len + k) * inner + i] = g[o * inner + i];
                    }
                }
                acc(*x, dx);
            }
            Op::BroadcastAdd(a, b) => {
                let map = broadcast_index("broadcast_add", self.value(*a), self.value(*b)).unwrap();
                let mut db = vec![0.0; self.value(*b).len()];
                for (i, gv) in g.iter().enumerate() {
                    db[map(i)] += gv;
                }
                acc(*a, g.to_vec());
                acc(*b, db);
            }
            Op::BroadcastMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let map = broadcast_index("broadcast_mul", av, bv).unwrap();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (i, gv) in g.iter().enumerate() {
                    da[i] = gv * bv.data()[map(i)];
                    db[map(i)] += gv * av.data()[i];
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::NormalizeRows { x, norms } => {
                let n = y.len() / norms.len();
                let mut dx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let range = r * n..(r + 1) * n;
                    let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                    for c in range {
                        dx[c] = (g[c] - y[c] * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, indices } => {
                let src = self.value(*x);
                let n = src.shape()[1];
                let mut dx = vec![0.0; src.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += g[r * n + c];
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient buffer per recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not reach the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        let mut t = match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => Tensor::zeros(&shape),
        };
        t.round_to(self.precision);
        t
    }

    /// Writes a gradient into every `requires_grad` tensor of `store`.
    /// Parameters never bound on `tape` receive zeros.
    pub fn assign(&self, tape: &Tape, store: &mut ParamStore) {
        for (name, tensor) in store.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = match tape.bound_var(name) {
                Some(v) => self.get(tape, v).into_data(),
                None => vec![0.0; tensor.len()],
            };
            tensor.set_grad(grad).expect("gradient matches parameter shape");
        }
    }
}
