//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] borrows a [`ParamStore`], records each primitive as it is
//! evaluated and replays the record backwards in [`Graph::backward`]. Nodes
//! are appended after their inputs, so reverse insertion order is a reverse
//! topological order.

use std::collections::HashMap;

use crate::conv::{self, ConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, PoolMode};
use crate::tensor::{Scalar, Tensor};

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        self.tensors[id.0].expect_same_shape("ParamStore::set", &value)?;
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy with a different element type; ids stay valid.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Gradient of a loss with respect to every parameter of a store.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// All-zero gradients shaped like `store`.
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self { grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        self.grads.iter().flat_map(|g| g.data()).map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, S),
    /// `x * s[idx]` where `s` is a vector-valued node.
    ScaleBy {
        x: Var,
        s: Var,
        idx: usize,
    },
    /// `x[t, l, ...] * beta[l]` for `x: [T, L, ...]`.
    ScaleSlots {
        x: Var,
        beta: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gate(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Softmax(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    PoolSpatial {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    MulSpatial {
        x: Var,
        g: Var,
    },
    FrameDot {
        x: Var,
        w: Var,
    },
    FrameWeightedSum {
        x: Var,
        p: Var,
    },
    GatherFrames {
        x: Var,
        offsets: Vec<isize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    /// Scalar loss with its gradient precomputed during the forward pass.
    Custom {
        x: Var,
        grad: Tensor<S>,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Option<Tensor<S>>,
    requires_grad: bool,
}

/// A recording of primitive applications over a parameter store.
pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), consumed: false }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op: Op::Input, value: Some(value), requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(Op::Add(a, b), y, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(Op::Sub(a, b), y, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(Op::Mul(a, b), y, &[a, b]))
    }

    pub fn scale_const(&mut self, x: Var, c: S) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(Op::ScaleConst(x, c), y, &[x])
    }

    /// Multiplies `x` by the scalar `s[idx]`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| shape_err("scale_by", format!("index {idx} out of {:?}", self.shape(s))))?;
        let y = self.value(x).map(|v| v * sv);
        Ok(self.push(Op::ScaleBy { x, s, idx }, y, &[x, s]))
    }

    /// `x[t, l, ...] * beta[l]`.
    pub fn scale_slots(&mut self, x: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        let l = self.value(beta).len();
        if xs.len() < 2 || xs[1] != l || self.value(beta).rank() != 1 {
            return Err(shape_err("scale_slots", format!("weights {:?} for slots of {xs:?}", self.shape(beta))));
        }
        let inner: usize = xs[2..].iter().product();
        let mut y = self.value(x).clone();
        let bv = self.value(beta).data().to_vec();
        for (k, chunk) in y.data_mut().chunks_exact_mut(inner.max(1)).enumerate() {
            let w = bv[k % l];
            for v in chunk {
                *v *= w;
            }
        }
        Ok(self.push(Op::ScaleSlots { x, beta }, y, &[x, beta]))
    }

    /// Adds `bias: [N]` to every row of `x: [M, N]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != n {
            return Err(shape_err("add_row_bias", format!("bias of {n} for {xs:?}")));
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in y.data_mut().chunks_exact_mut(n.max(1)) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddRowBias { x, bias }, y, &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        self.push(Op::Sigmoid(x), y, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(S::tanh);
        self.push(Op::Tanh(x), y, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(Op::Relu(x), y, &[x])
    }

    /// `sigmoid(x) - 0.5`, strictly inside `(-0.5, 0.5)`.
    pub fn gate(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::gate);
        self.push(Op::Gate(x), y, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), y, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = transpose2d(self.value(x))?;
        Ok(self.push(Op::Transpose(x), y, &[x]))
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), y, &[a, b]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastaxis(self.value(x))?;
        Ok(self.push(Op::Softmax(x), y, &[x]))
    }

    /// Convolution over `[T, C, H, W]` with a rank-5 kernel and optional bias.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { x, w, b, spec }, y, &inputs))
    }

    pub fn pool_spatial(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (y, argmax) = ops::pool_spatial_with_argmax(self.value(x), mode)?;
        Ok(self.push(Op::PoolSpatial { x, mode, argmax }, y, &[x]))
    }

    /// Kernel-2 stride-2 max pooling over time for `[T, C]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool_time(self.value(x))?;
        Ok(self.push(Op::MaxPoolTime { x, argmax }, y, &[x]))
    }

    /// `x: [T, C, H, W]` times `g: [T, C]` (or `[T, C, 1, 1]`) broadcast over space.
    pub fn mul_spatial(&mut self, x: Var, g: Var) -> Result<Var> {
        let y = ops::mul_spatial(self.value(x), self.value(g))?;
        Ok(self.push(Op::MulSpatial { x, g }, y, &[x, g]))
    }

    /// `out[b, ...] = sum_c w[b, c] x[b, c, ...]`, `w` either `[B, C, ..]` or shared `[C]`.
    pub fn frame_dot(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::frame_dot(self.value(x), self.value(w))?;
        Ok(self.push(Op::FrameDot { x, w }, y, &[x, w]))
    }

    /// `out[b, c] = sum_s p[b, s] x[b, c, s]`.
    pub fn frame_weighted_sum(&mut self, x: Var, p: Var) -> Result<Var> {
        let y = ops::frame_weighted_sum(self.value(x), self.value(p))?;
        Ok(self.push(Op::FrameWeightedSum { x, p }, y, &[x, p]))
    }

    /// Neighbour gathering `[T, C, H, W] -> [T, C, L, H, W]` with edge clamping.
    pub fn gather_frames(&mut self, x: Var, offsets: &[isize]) -> Result<Var> {
        let y = ops::gather_frames(self.value(x), offsets)?;
        Ok(self.push(Op::GatherFrames { x, offsets: offsets.to_vec() }, y, &[x]))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.value(x))?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {m}")));
        }
        let y = Tensor::new([len, n], self.value(x).data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(Op::SliceRows { x, start }, y, &[x]))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.value(x))?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let y = Tensor::new([m, len], out)?;
        Ok(self.push(Op::SliceCols { x, start }, y, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = dims2("concat_rows", self.value(parts[0]))?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims2("concat_rows", self.value(p))?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("{pn} columns vs {n}")));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let y = Tensor::new([m, n], out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), y, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = dims2("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2("concat_cols", self.value(p))?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("{pm} rows vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let y = Tensor::new([m, n], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), y, parts))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), y, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale_const(s, S::one() / S::of(n as f64))
    }

    /// Records a scalar-valued function of `x` whose gradient `d value / d x`
    /// the caller has already computed.
    pub fn custom_scalar(&mut self, x: Var, value: S, grad: Tensor<S>) -> Result<Var> {
        self.value(x).expect_same_shape("custom_scalar", &grad)?;
        Ok(self.push(Op::Custom { x, grad }, Tensor::scalar(value), &[x]))
    }

    /// Replays the tape from `loss` and returns the gradient of every
    /// parameter in the store (exact zeros for parameters not reached).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut Gradients<S>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<S>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => out.grads[id.0].add_assign(&g)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g)?;
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v))?;
                acc(*a, g)?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q)?)?;
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q)?)?;
                }
            }
            Op::ScaleConst(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c))?;
            }
            Op::ScaleBy { x, s, idx } => {
                if self.wants(*s) {
                    let d: S = g.data().iter().zip(self.value(*x).data()).map(|(&p, &q)| p * q).sum();
                    let mut ds = Tensor::zeros(self.shape(*s));
                    ds.data_mut()[*idx] = d;
                    acc(*s, ds)?;
                }
                let sv = self.value(*s).data()[*idx];
                acc(*x, g.map(|v| v * sv))?;
            }
            Op::ScaleSlots { x, beta } => {
                let bv = self.value(*beta).data();
                let l = bv.len();
                let inner: usize = self.shape(*x)[2..].iter().product::<usize>().max(1);
                if self.wants(*beta) {
                    let mut db = Tensor::zeros([l]);
                    for (k, (gs, xs)) in
                        g.data().chunks_exact(inner).zip(self.value(*x).data().chunks_exact(inner)).enumerate()
                    {
                        db.data_mut()[k % l] += gs.iter().zip(xs).map(|(&p, &q)| p * q).sum::<S>();
                    }
                    acc(*beta, db)?;
                }
                let mut dx = g;
                for (k, chunk) in dx.data_mut().chunks_exact_mut(inner).enumerate() {
                    for v in chunk {
                        *v *= bv[k % l];
                    }
                }
                acc(*x, dx)?;
            }
            Op::AddRowBias { x, bias } => {
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = Tensor::zeros([n]);
                    for row in g.data().chunks_exact(n.max(1)) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db)?;
                }
                acc(*x, g)?;
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                acc(*x, g.zip_map(y, |d, s| d * s * (S::one() - s))?)?;
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                acc(*x, g.zip_map(y, |d, t| d * (S::one() - t * t))?)?;
            }
            Op::Relu(x) => {
                acc(*x, g.zip_map(self.value(*x), |d, v| if v > S::zero() { d } else { S::zero() })?)?;
            }
            Op::Gate(x) => {
                // d/dx sigmoid = s(1 - s) with s = gate + 1/2
                let y = self.nodes[i].value.as_ref().expect("value");
                let quarter = S::of(0.25);
                acc(*x, g.zip_map(y, |d, v| d * (quarter - v * v))?)?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(shape)?)?;
            }
            Op::Transpose(x) => acc(*x, transpose2d(&g)?)?,
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2("matmul", av)?;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), S::zero(), &mut da, (k, 1));
                    acc(*a, Tensor::new([m, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), S::zero(), &mut db, (n, 1));
                    acc(*b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(n.max(1)).zip(y.data().chunks_exact(n.max(1))) {
                    let dot: S = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                acc(*x, dx)?;
            }
            Op::Conv { x, w, b, spec } => {
                let grads_c = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    spec,
                    &g,
                    (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))),
                )?;
                if let Some(dx) = grads_c.dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = grads_c.dw {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, grads_c.db) {
                    acc(*b, db)?;
                }
            }
            Op::PoolSpatial { x, mode, argmax } => {
                let xs = self.shape(*x);
                let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
                let mut dx = Tensor::zeros(xs);
                match mode {
                    PoolMode::Avg => {
                        let inv = S::one() / S::of(plane as f64);
                        for (chunk, &gv) in dx.data_mut().chunks_exact_mut(plane).zip(g.data()) {
                            chunk.fill(gv * inv);
                        }
                    }
                    PoolMode::Max => {
                        for (&pos, &gv) in argmax.iter().zip(g.data()) {
                            dx.data_mut()[pos] = gv;
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::MaxPoolTime { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&pos, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[pos] += gv;
                }
                acc(*x, dx)?;
            }
            Op::MulSpatial { x, g: gain } => {
                let (dx, dg) = ops::mul_spatial_backward(self.value(*x), self.value(*gain), &g)?;
                acc(*x, dx)?;
                acc(*gain, dg)?;
            }
            Op::FrameDot { x, w } => {
                let (dx, dw) = ops::frame_dot_backward(self.value(*x), self.value(*w), &g)?;
                acc(*x, dx)?;
                acc(*w, dw)?;
            }
            Op::FrameWeightedSum { x, p } => {
                let (dx, dp) = ops::frame_weighted_sum_backward(self.value(*x), self.value(*p), &g)?;
                acc(*x, dx)?;
                acc(*p, dp)?;
            }
            Op::GatherFrames { x, offsets } => {
                acc(*x, ops::gather_frames_backward(&g, self.shape(*x), offsets)?)?;
            }
            Op::SliceRows { x, start } => {
                let (m, n) = dims2("slice_rows", self.value(*x))?;
                let mut dx = Tensor::zeros([m, n]);
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, dx)?;
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2("slice_cols", self.value(*x))?;
                let len = g.shape()[1];
                let mut dx = Tensor::zeros([m, n]);
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let piece = Tensor::new(self.shape(p), g.data()[off..off + len].to_vec())?;
                    acc(p, piece)?;
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = dims2("concat_cols", self.value(p))?;
                    let mut piece = Vec::with_capacity(m * w);
                    for r in 0..m {
                        piece.extend_from_slice(&g.data()[r * n + col..r * n + col + w]);
                    }
                    acc(p, Tensor::new([m, w], piece)?)?;
                    col += w;
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::Custom { x, grad } => {
                let gv = g.item();
                acc(*x, grad.map(|v| v * gv))?;
            }
        }
        Ok(())
    }
}

fn dims2<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut c = vec![S::zero(); m * n];
    S::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), S::zero(), &mut c, (n, 1));
    Tensor::new([m, n], c)
}

fn transpose2d<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = dims2("transpose", a)?;
    let mut out = vec![S::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.data()[r * n + c];
        }
    }
    Tensor::new([n, m], out)
}
