//! Reverse-mode differentiation over a fixed vocabulary of tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse, applying the
//! hand-derived adjoint of each operation. Parameters live in a [`ParamStore`]
//! that the tape borrows; their gradients are collected into [`Gradients`].
//!
//! Label axes of the span operations broadcast: an extent of 1 is shared by
//! every label.

use std::collections::HashMap;
use std::sync::Arc;

use super::linalg::{axpy, gemm, Mat};
use super::{dot, log_sum_exp, Activation, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::span::{Segments, Span};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter '{name}'");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients. Parameters the loss never touched have no entry
/// and read back as exact zeros.
#[derive(Clone, Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { shapes: store.values.iter().map(|t| t.shape().to_vec()).collect(), grads: vec![None; store.len()] }
    }

    /// Gradient of `id`, or `None` if nothing flowed into it.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn dense(&self, id: ParamId) -> Tensor {
        self.grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    fn add(&mut self, id: ParamId, contribution: &[f64], scale: f64) {
        let slot = &mut self.grads[id.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(&self.shapes[id.0]));
        axpy(scale, contribution, g.data_mut());
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g.data(), scale);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Bookkeeping from one backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub recorded: usize,
    pub visited: usize,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Sigmoid(NodeId),
    AppendOne(NodeId),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Arc<[usize]>),
    Mask(NodeId, Arc<[f64]>),
    Reshape(NodeId),
    Sum(NodeId),
    BoundaryContract { w: NodeId, u: NodeId, v: NodeId, spans: Arc<[Span]>, plan: ContractPlan },
    SegItemDot { c: NodeId, k: NodeId, seg: Arc<Segments> },
    SegSoftmax(NodeId, Arc<Segments>),
    SegWeightedSum { a: NodeId, val: NodeId, seg: Arc<Segments>, select: Arc<[usize]> },
    SegDot { a: NodeId, b: NodeId, seg: Arc<Segments> },
    LabelDot(NodeId, NodeId),
    AddLabelBias(NodeId, NodeId),
    ItemGather(NodeId, Arc<Segments>),
    SegBroadcast(NodeId, Arc<Segments>),
    BoundaryPair { zi: NodeId, zj: NodeId, spans: Arc<[Span]> },
    SpanGather(NodeId, Arc<[usize]>),
    SpanCrossEntropy { logits: NodeId, gold: Arc<[usize]>, probs: Vec<f64> },
}

/// Cached intermediate of a boundary contraction: the tensor contracted with
/// the left boundary, one slab per distinct span start.
#[derive(Debug)]
struct ContractPlan {
    starts: Vec<usize>,
    groups: Vec<Vec<usize>>,
    partial: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn broadcast(a: usize, b: usize, what: &str) -> Result<usize> {
    match (a, b) {
        _ if a == b => Ok(a),
        (1, _) => Ok(b),
        (_, 1) => Ok(a),
        _ => Err(shape_err!("{what}: extents {a} and {b} do not broadcast")),
    }
}

#[inline]
fn lab(r: usize, extent: usize) -> usize {
    if extent == 1 {
        0
    } else {
        r
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(shape_err!("{what}: expected a matrix, got {s:?}")),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(shape_err!("{what}: expected a rank-3 tensor, got {s:?}")),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Each parameter is recorded at most once.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value: Some(value), op: Op::Const, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, m) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul: inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; n * m];
        gemm(1.0, Mat::rm(self.value(a).data(), n, k), Mat::rm(self.value(b).data(), k, m), 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = dims2(self.value(a), "matmul_nt lhs")?;
        let (m, k2) = dims2(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul_nt: inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; n * m];
        gemm(1.0, Mat::rm(self.value(a).data(), n, k), Mat::rm(self.value(b).data(), m, k).t(), 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNT(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = dims2(self.value(a), "add_bias")?;
        let bias = self.value(b);
        if bias.len() != m {
            return Err(shape_err!("add_bias: {m} columns but bias of length {}", bias.len()));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            axpy(1.0, bias.data(), row);
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddBias(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("elementwise op on {:?} and {:?}", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let x = self.value(a);
        let out = x.data().iter().map(|v| v * c).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return a;
        }
        let x = self.value(a);
        let out = x.data().iter().map(|&v| act.apply(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Act(a, act), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(a), &[a])
    }

    /// `[n, d] -> [n, d + 1]` with a trailing column of ones.
    pub fn append_one(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = dims2(self.value(a), "append_one")?;
        let mut out = Vec::with_capacity(n * (d + 1));
        for row in self.value(a).data().chunks_exact(d) {
            out.extend_from_slice(row);
            out.push(1.0);
        }
        Ok(self.push(Tensor::from_parts(vec![n, d + 1], out), Op::AppendOne(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(dims2(self.value(p), "concat_cols")?);
        }
        let n = dims.first().map(|d| d.0).ok_or_else(|| shape_err!("concat of nothing"))?;
        if dims.iter().any(|d| d.0 != n) {
            return Err(shape_err!("concat_cols: row counts differ: {dims:?}"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let width = rows.first().map(|&r| self.value(r).len()).ok_or_else(|| shape_err!("stack of nothing"))?;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if v.len() != width {
                return Err(shape_err!("stack_rows: row of {} values, expected {width}", v.len()));
            }
            out.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows.len(), width], out), Op::StackRows(rows.to_vec()), rows))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = dims2(self.value(a), "slice_rows")?;
        if start + len > n || len == 0 {
            return Err(shape_err!("slice_rows {start}..{} of {n} rows", start + len));
        }
        let out = self.value(a).data()[start * m..(start + len) * m].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, m], out), Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = dims2(self.value(a), "slice_cols")?;
        if start + len > m || len == 0 {
            return Err(shape_err!("slice_cols {start}..{} of {m} columns", start + len));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup, e.g. an embedding table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, e) = dims2(self.value(table), "gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("row {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        Ok(self.push(Tensor::from_parts(vec![ids.len(), e], out), Op::GatherRows(table, ids.into()), &[table]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let x = self.value(a);
        if x.len() != mask.len() {
            return Err(shape_err!("mask of {} values for tensor {:?}", mask.len(), x.shape()));
        }
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mask(a, mask.into()), &[a]))
    }

    /// Inverted dropout. A no-op when `p == 0`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, a: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be below 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.mask(a, mask)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Contracts label-wise rank-3 tensors with left and right boundary vectors:
    /// `out[r, s, b] = sum_{a,c} w[r, a, b, c] * u[start_s, a] * v[end_s, c]`.
    ///
    /// `w` is `[R, A, B, C]`, `u` is `[N, A]`, `v` is `[N, C]`; the result is
    /// `[R, S, B]`.
    pub fn boundary_contract(&mut self, w: NodeId, u: NodeId, v: NodeId, spans: Arc<[Span]>) -> Result<NodeId> {
        let wt = self.value(w);
        let (r, a, b, c) = match wt.shape() {
            &[r, a, b, c] => (r, a, b, c),
            s => return Err(shape_err!("boundary_contract: tensor must be rank 4, got {s:?}")),
        };
        let (nu, au) = dims2(self.value(u), "boundary_contract u")?;
        let (nv, cv) = dims2(self.value(v), "boundary_contract v")?;
        if au != a {
            return Err(shape_err!("boundary_contract: axis 1 has extent {a} but u has width {au}"));
        }
        if cv != c {
            return Err(shape_err!("boundary_contract: axis 3 has extent {c} but v has width {cv}"));
        }
        if let Some(s) = spans.iter().find(|s| s.start > s.end || s.start >= nu || s.end >= nv) {
            return Err(Error::Precondition(format!("span {s} outside {nu} tokens")));
        }
        let mut starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
        starts.sort_unstable();
        starts.dedup();
        let mut groups = vec![Vec::new(); starts.len()];
        for (si, s) in spans.iter().enumerate() {
            let p = starts.binary_search(&s.start).expect("start indexed");
            groups[p].push(si);
        }
        let ni = starts.len();
        let bc = b * c;
        let mut ustack = Vec::with_capacity(ni * a);
        for &i in &starts {
            ustack.extend_from_slice(self.value(u).row(i));
        }
        let mut partial = vec![0.0; r * ni * bc];
        for ri in 0..r {
            gemm(
                1.0,
                Mat::rm(&ustack, ni, a),
                Mat::rm(&wt.data()[ri * a * bc..(ri + 1) * a * bc], a, bc),
                0.0,
                &mut partial[ri * ni * bc..(ri + 1) * ni * bc],
            );
        }
        let ns = spans.len();
        let mut out = vec![0.0; r * ns * b];
        let vt = self.value(v);
        let mut vsel = Vec::new();
        let mut tmp = Vec::new();
        for (p, group) in groups.iter().enumerate() {
            vsel.clear();
            for &si in group {
                vsel.extend_from_slice(vt.row(spans[si].end));
            }
            tmp.resize(group.len() * b, 0.0);
            for ri in 0..r {
                let slab = &partial[(ri * ni + p) * bc..(ri * ni + p + 1) * bc];
                gemm(1.0, Mat::rm(&vsel, group.len(), c), Mat::rm(slab, b, c).t(), 0.0, &mut tmp);
                for (g, &si) in group.iter().enumerate() {
                    out[(ri * ns + si) * b..(ri * ns + si + 1) * b].copy_from_slice(&tmp[g * b..(g + 1) * b]);
                }
            }
        }
        let plan = ContractPlan { starts, groups, partial };
        Ok(self.push(
            Tensor::from_parts(vec![r, ns, b], out),
            Op::BoundaryContract { w, u, v, spans, plan },
            &[w, u, v],
        ))
    }

    /// `out[r, t] = c[r, seg(t), :] . k[r, item(t), :]` for `c: [R, S, D]` and
    /// `k: [R, M, D]`.
    pub fn seg_item_dot(&mut self, c: NodeId, k: NodeId, seg: Arc<Segments>) -> Result<NodeId> {
        let (rc, s, d) = dims3(self.value(c), "seg_item_dot c")?;
        let (rk, m, dk) = dims3(self.value(k), "seg_item_dot k")?;
        let r = broadcast(rc, rk, "seg_item_dot labels")?;
        if d != dk || s != seg.len() || m != seg.item_extent() {
            return Err(shape_err!(
                "seg_item_dot: c {:?}, k {:?} against {} segments over {} items",
                self.value(c).shape(),
                self.value(k).shape(),
                seg.len(),
                seg.item_extent()
            ));
        }
        let (cv, kv) = (self.value(c).data(), self.value(k).data());
        let t_total = seg.total();
        let mut out = vec![0.0; r * t_total];
        for ri in 0..r {
            let (ci, ki) = (lab(ri, rc), lab(ri, rk));
            for si in 0..s {
                let crow = &cv[(ci * s + si) * d..(ci * s + si + 1) * d];
                for t in seg.range(si) {
                    let it = seg.item(t);
                    out[ri * t_total + t] = dot(crow, &kv[(ki * m + it) * d..(ki * m + it + 1) * d]);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, t_total], out), Op::SegItemDot { c, k, seg }, &[c, k]))
    }

    /// Softmax over the items of every segment, per label.
    pub fn seg_softmax(&mut self, x: NodeId, seg: Arc<Segments>) -> Result<NodeId> {
        let (r, t_total) = dims2(self.value(x), "seg_softmax")?;
        if t_total != seg.total() {
            return Err(shape_err!("seg_softmax: {t_total} scores for {} items", seg.total()));
        }
        let mut out = self.value(x).data().to_vec();
        for ri in 0..r {
            for si in 0..seg.len() {
                let range = seg.range(si);
                let row = &mut out[ri * t_total + range.start..ri * t_total + range.end];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, t_total], out), Op::SegSoftmax(x, seg), &[x]))
    }

    /// `out[r, l, :] = sum_{t in seg(select[l])} a[r, t] * val[r, item(t), :]`.
    pub fn seg_weighted_sum(
        &mut self,
        a: NodeId,
        val: NodeId,
        seg: Arc<Segments>,
        select: Arc<[usize]>,
    ) -> Result<NodeId> {
        let (ra, t_total) = dims2(self.value(a), "seg_weighted_sum weights")?;
        let (rv, m, d) = dims3(self.value(val), "seg_weighted_sum values")?;
        let r = broadcast(ra, rv, "seg_weighted_sum labels")?;
        if t_total != seg.total() || m != seg.item_extent() || select.iter().any(|&s| s >= seg.len()) {
            return Err(shape_err!("seg_weighted_sum: operands do not match the segments"));
        }
        let (av, vv) = (self.value(a).data(), self.value(val).data());
        let l = select.len();
        let mut out = vec![0.0; r * l * d];
        for ri in 0..r {
            let (ai, vi) = (lab(ri, ra), lab(ri, rv));
            for (li, &si) in select.iter().enumerate() {
                let dst = &mut out[(ri * l + li) * d..(ri * l + li + 1) * d];
                for t in seg.range(si) {
                    let it = seg.item(t);
                    axpy(av[ai * t_total + t], &vv[(vi * m + it) * d..(vi * m + it + 1) * d], dst);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, l, d], out), Op::SegWeightedSum { a, val, seg, select }, &[a, val]))
    }

    /// `out[r, s] = sum_{t in seg(s)} a[r, t] * b[r, t]`.
    pub fn seg_dot(&mut self, a: NodeId, b: NodeId, seg: Arc<Segments>) -> Result<NodeId> {
        let (ra, ta) = dims2(self.value(a), "seg_dot a")?;
        let (rb, tb) = dims2(self.value(b), "seg_dot b")?;
        let r = broadcast(ra, rb, "seg_dot labels")?;
        if ta != seg.total() || tb != seg.total() {
            return Err(shape_err!("seg_dot: {ta} and {tb} items for {} expected", seg.total()));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = seg.len();
        let mut out = vec![0.0; r * s];
        for ri in 0..r {
            let (ai, bi) = (lab(ri, ra), lab(ri, rb));
            for si in 0..s {
                let range = seg.range(si);
                out[ri * s + si] = dot(
                    &av[ai * ta + range.start..ai * ta + range.end],
                    &bv[bi * tb + range.start..bi * tb + range.end],
                );
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, s], out), Op::SegDot { a, b, seg }, &[a, b]))
    }

    /// Row-wise dot product of two `[R, S, D]` tensors (either axis may broadcast).
    pub fn label_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, sa, d) = dims3(self.value(a), "label_dot a")?;
        let (rb, sb, db) = dims3(self.value(b), "label_dot b")?;
        let r = broadcast(ra, rb, "label_dot labels")?;
        let s = broadcast(sa, sb, "label_dot spans")?;
        if d != db {
            return Err(shape_err!("label_dot: widths {d} and {db} differ"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; r * s];
        for ri in 0..r {
            for si in 0..s {
                let x = (lab(ri, ra) * sa + lab(si, sa)) * d;
                let y = (lab(ri, rb) * sb + lab(si, sb)) * d;
                out[ri * s + si] = dot(&av[x..x + d], &bv[y..y + d]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, s], out), Op::LabelDot(a, b), &[a, b]))
    }

    /// `out[r, x] = a[r, x] + b[r]`.
    pub fn add_label_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, n) = dims2(self.value(a), "add_label_bias")?;
        if self.value(b).len() != r {
            return Err(shape_err!("add_label_bias: {r} labels, bias of {}", self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (ri, row) in out.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[ri]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, n], out), Op::AddLabelBias(a, b), &[a, b]))
    }

    /// `out[r, t] = z[r, item(t)]`.
    pub fn item_gather(&mut self, z: NodeId, seg: Arc<Segments>) -> Result<NodeId> {
        let (r, m) = dims2(self.value(z), "item_gather")?;
        if m != seg.item_extent() {
            return Err(shape_err!("item_gather: {m} items, segments expect {}", seg.item_extent()));
        }
        let zv = self.value(z).data();
        let t_total = seg.total();
        let mut out = Vec::with_capacity(r * t_total);
        for ri in 0..r {
            out.extend((0..t_total).map(|t| zv[ri * m + seg.item(t)]));
        }
        Ok(self.push(Tensor::from_parts(vec![r, t_total], out), Op::ItemGather(z, seg), &[z]))
    }

    /// `out[r, t] = x[r, seg(t)]`.
    pub fn seg_broadcast(&mut self, x: NodeId, seg: Arc<Segments>) -> Result<NodeId> {
        let (r, s) = dims2(self.value(x), "seg_broadcast")?;
        if s != seg.len() {
            return Err(shape_err!("seg_broadcast: {s} values for {} segments", seg.len()));
        }
        let xv = self.value(x).data();
        let t_total = seg.total();
        let mut out = vec![0.0; r * t_total];
        for ri in 0..r {
            for si in 0..s {
                for t in seg.range(si) {
                    out[ri * t_total + t] = xv[ri * s + si];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, t_total], out), Op::SegBroadcast(x, seg), &[x]))
    }

    /// `out[r, s] = zi[r, start_s] + zj[r, end_s]`.
    pub fn boundary_pair(&mut self, zi: NodeId, zj: NodeId, spans: Arc<[Span]>) -> Result<NodeId> {
        let (r, n) = dims2(self.value(zi), "boundary_pair")?;
        if self.value(zj).shape() != [r, n] {
            return Err(shape_err!("boundary_pair: operand shapes differ"));
        }
        if spans.iter().any(|s| s.end >= n) {
            return Err(Error::Precondition("boundary_pair: span outside sentence".into()));
        }
        let (a, b) = (self.value(zi).data(), self.value(zj).data());
        let mut out = Vec::with_capacity(r * spans.len());
        for ri in 0..r {
            out.extend(spans.iter().map(|s| a[ri * n + s.start] + b[ri * n + s.end]));
        }
        let ns = spans.len();
        Ok(self.push(Tensor::from_parts(vec![r, ns], out), Op::BoundaryPair { zi, zj, spans }, &[zi, zj]))
    }

    /// Selects rows of the span axis of an `[R, S, D]` tensor.
    pub fn span_gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, s, d) = dims3(self.value(x), "span_gather")?;
        if idx.iter().any(|&i| i >= s) {
            return Err(Error::Index(format!("span_gather index out of range for {s} spans")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * idx.len() * d);
        for ri in 0..r {
            for &i in idx {
                out.extend_from_slice(&xv[(ri * s + i) * d..(ri * s + i + 1) * d]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, idx.len(), d], out), Op::SpanGather(x, idx.into()), &[x]))
    }

    /// Mean over spans of the cross-entropy of `logits[:, s]` against `gold[s]`.
    pub fn span_cross_entropy(&mut self, logits: NodeId, gold: &[usize]) -> Result<NodeId> {
        let (r, s) = dims2(self.value(logits), "span_cross_entropy")?;
        if gold.len() != s {
            return Err(shape_err!("span_cross_entropy: {s} spans but {} gold labels", gold.len()));
        }
        if let Some(g) = gold.iter().find(|&&g| g >= r) {
            return Err(Error::Index(format!("gold label {g} out of range for {r} labels")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; r * s];
        let mut total = 0.0;
        let mut col = vec![0.0; r];
        for (si, &g) in gold.iter().enumerate() {
            for ri in 0..r {
                col[ri] = lv[ri * s + si];
            }
            let lse = log_sum_exp(&col);
            total += lse - col[g];
            for ri in 0..r {
                probs[ri * s + si] = (col[ri] - lse).exp();
            }
        }
        let loss = total / s as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SpanCrossEntropy { logits, gold: gold.into(), probs }, &[logits]))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.store);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * d(loss)/d(param)` into `out`.
    pub fn backward_into(&self, loss: NodeId, scale: f64, out: &mut Gradients) -> Result<BackwardStats> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err!("backward from non-scalar node of shape {:?}", lv.shape()));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![scale]);
        let mut stats = BackwardStats { recorded: self.nodes.len(), visited: 0 };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            stats.visited += 1;
            self.propagate(idx, &g, &mut grads, out)?;
        }
        Ok(stats)
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => axpy(1.0, &contribution, g),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Param(p) => out.add(*p, g, 1.0),
            Op::Const => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a), "matmul")?;
                let m = self.value(*b).shape()[1];
                let mut da = vec![0.0; n * k];
                gemm(1.0, Mat::rm(g, n, m), Mat::rm(self.value(*b).data(), k, m).t(), 0.0, &mut da);
                let mut db = vec![0.0; k * m];
                gemm(1.0, Mat::rm(self.value(*a).data(), n, k).t(), Mat::rm(g, n, m), 0.0, &mut db);
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = dims2(self.value(*a), "matmul_nt")?;
                let m = self.value(*b).shape()[0];
                let mut da = vec![0.0; n * k];
                gemm(1.0, Mat::rm(g, n, m), Mat::rm(self.value(*b).data(), m, k), 0.0, &mut da);
                let mut db = vec![0.0; m * k];
                gemm(1.0, Mat::rm(g, n, m).t(), Mat::rm(self.value(*a).data(), n, k), 0.0, &mut db);
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::AddBias(a, b) => {
                let m = self.value(*b).len();
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    axpy(1.0, row, &mut db);
                }
                self.add_grad(grads, *a, g.to_vec());
                self.add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.to_vec());
                self.add_grad(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.to_vec());
                self.add_grad(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                self.add_grad(grads, *a, g.iter().zip(z).map(|(g, z)| g * z).collect());
                self.add_grad(grads, *b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => self.add_grad(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Act(a, act) => {
                let y = y.expect("activation value").data();
                let da = g.iter().zip(y).map(|(g, y)| g * act.derivative_from_output(*y)).collect();
                self.add_grad(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = y.expect("sigmoid value").data();
                let da = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.add_grad(grads, *a, da);
            }
            Op::AppendOne(a) => {
                let (_, d) = dims2(self.value(*a), "append_one")?;
                let da = g.chunks_exact(d + 1).flat_map(|row| row[..d].iter().copied()).collect();
                self.add_grad(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let total: usize = y.expect("concat value").shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let dp = g.chunks_exact(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                    self.add_grad(grads, p, dp);
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let width = self.value(rows[0]).len();
                for (k, &r) in rows.iter().enumerate() {
                    self.add_grad(grads, r, g[k * width..(k + 1) * width].to_vec());
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let m = src.shape()[1];
                let mut da = vec![0.0; src.len()];
                da[start * m..start * m + g.len()].copy_from_slice(g);
                self.add_grad(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (n, m) = dims2(src, "slice_cols")?;
                let len = g.len() / n;
                let mut da = vec![0.0; src.len()];
                for r in 0..n {
                    da[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_grad(grads, *a, da);
            }
            Op::GatherRows(table, ids) => {
                let src = self.value(*table);
                let e = src.shape()[1];
                let mut dt = vec![0.0; src.len()];
                for (k, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[k * e..(k + 1) * e], &mut dt[id * e..(id + 1) * e]);
                }
                self.add_grad(grads, *table, dt);
            }
            Op::Mask(a, mask) => {
                self.add_grad(grads, *a, g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect());
            }
            Op::Reshape(a) => self.add_grad(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.add_grad(grads, *a, vec![g[0]; n]);
            }
            Op::BoundaryContract { w, u, v, spans, plan } => {
                self.contract_backward(*w, *u, *v, spans, plan, g, grads)?;
            }
            Op::SegItemDot { c, k, seg } => {
                let (rc, s, d) = dims3(self.value(*c), "seg_item_dot")?;
                let (rk, m, _) = dims3(self.value(*k), "seg_item_dot")?;
                let r = rc.max(rk);
                let t_total = seg.total();
                let (cv, kv) = (self.value(*c).data(), self.value(*k).data());
                let mut dc = vec![0.0; cv.len()];
                let mut dk = vec![0.0; kv.len()];
                for ri in 0..r {
                    let (ci, ki) = (lab(ri, rc), lab(ri, rk));
                    for si in 0..s {
                        let co = (ci * s + si) * d;
                        for t in seg.range(si) {
                            let gt = g[ri * t_total + t];
                            if gt == 0.0 {
                                continue;
                            }
                            let ko = (ki * m + seg.item(t)) * d;
                            axpy(gt, &kv[ko..ko + d], &mut dc[co..co + d]);
                            axpy(gt, &cv[co..co + d], &mut dk[ko..ko + d]);
                        }
                    }
                }
                self.add_grad(grads, *c, dc);
                self.add_grad(grads, *k, dk);
            }
            Op::SegSoftmax(x, seg) => {
                let yv = y.expect("softmax value").data();
                let t_total = seg.total();
                let r = yv.len() / t_total;
                let mut dx = vec![0.0; yv.len()];
                for ri in 0..r {
                    for si in 0..seg.len() {
                        let range = seg.range(si);
                        let base = ri * t_total;
                        let inner: f64 = range.clone().map(|t| g[base + t] * yv[base + t]).sum();
                        for t in range {
                            dx[base + t] = yv[base + t] * (g[base + t] - inner);
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SegWeightedSum { a, val, seg, select } => {
                let (ra, t_total) = dims2(self.value(*a), "seg_weighted_sum")?;
                let (rv, m, d) = dims3(self.value(*val), "seg_weighted_sum")?;
                let r = ra.max(rv);
                let l = select.len();
                let (av, vv) = (self.value(*a).data(), self.value(*val).data());
                let mut da = vec![0.0; av.len()];
                let mut dv = vec![0.0; vv.len()];
                for ri in 0..r {
                    let (ai, vi) = (lab(ri, ra), lab(ri, rv));
                    for (li, &si) in select.iter().enumerate() {
                        let go = &g[(ri * l + li) * d..(ri * l + li + 1) * d];
                        for t in seg.range(si) {
                            let vo = (vi * m + seg.item(t)) * d;
                            da[ai * t_total + t] += dot(go, &vv[vo..vo + d]);
                            axpy(av[ai * t_total + t], go, &mut dv[vo..vo + d]);
                        }
                    }
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *val, dv);
            }
            Op::SegDot { a, b, seg } => {
                let (ra, t_total) = dims2(self.value(*a), "seg_dot")?;
                let (rb, _) = dims2(self.value(*b), "seg_dot")?;
                let r = ra.max(rb);
                let s = seg.len();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for ri in 0..r {
                    let (ai, bi) = (lab(ri, ra), lab(ri, rb));
                    for si in 0..s {
                        let gs = g[ri * s + si];
                        for t in seg.range(si) {
                            da[ai * t_total + t] += gs * bv[bi * t_total + t];
                            db[bi * t_total + t] += gs * av[ai * t_total + t];
                        }
                    }
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::LabelDot(a, b) => {
                let (ra, sa, d) = dims3(self.value(*a), "label_dot")?;
                let (rb, sb, _) = dims3(self.value(*b), "label_dot")?;
                let (r, s) = (ra.max(rb), sa.max(sb));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for ri in 0..r {
                    for si in 0..s {
                        let gs = g[ri * s + si];
                        let x = (lab(ri, ra) * sa + lab(si, sa)) * d;
                        let z = (lab(ri, rb) * sb + lab(si, sb)) * d;
                        axpy(gs, &bv[z..z + d], &mut da[x..x + d]);
                        axpy(gs, &av[x..x + d], &mut db[z..z + d]);
                    }
                }
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::AddLabelBias(a, b) => {
                let r = self.value(*b).len();
                let n = g.len() / r;
                let db = g.chunks_exact(n).map(|row| row.iter().sum()).collect();
                self.add_grad(grads, *a, g.to_vec());
                self.add_grad(grads, *b, db);
            }
            Op::ItemGather(z, seg) => {
                let (r, m) = dims2(self.value(*z), "item_gather")?;
                let t_total = seg.total();
                let mut dz = vec![0.0; r * m];
                for ri in 0..r {
                    for t in 0..t_total {
                        dz[ri * m + seg.item(t)] += g[ri * t_total + t];
                    }
                }
                self.add_grad(grads, *z, dz);
            }
            Op::SegBroadcast(x, seg) => {
                let (r, s) = dims2(self.value(*x), "seg_broadcast")?;
                let t_total = seg.total();
                let mut dx = vec![0.0; r * s];
                for ri in 0..r {
                    for si in 0..s {
                        dx[ri * s + si] = seg.range(si).map(|t| g[ri * t_total + t]).sum();
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::BoundaryPair { zi, zj, spans } => {
                let (r, n) = dims2(self.value(*zi), "boundary_pair")?;
                let ns = spans.len();
                let mut di = vec![0.0; r * n];
                let mut dj = vec![0.0; r * n];
                for ri in 0..r {
                    for (si, s) in spans.iter().enumerate() {
                        di[ri * n + s.start] += g[ri * ns + si];
                        dj[ri * n + s.end] += g[ri * ns + si];
                    }
                }
                self.add_grad(grads, *zi, di);
                self.add_grad(grads, *zj, dj);
            }
            Op::SpanGather(x, idx) => {
                let (r, s, d) = dims3(self.value(*x), "span_gather")?;
                let l = idx.len();
                let mut dx = vec![0.0; r * s * d];
                for ri in 0..r {
                    for (li, &i) in idx.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[(ri * l + li) * d..(ri * l + li + 1) * d],
                            &mut dx[(ri * s + i) * d..(ri * s + i + 1) * d],
                        );
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SpanCrossEntropy { logits, gold, probs } => {
                let s = gold.len();
                let scale = g[0] / s as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (si, &gl) in gold.iter().enumerate() {
                    dl[gl * s + si] -= scale;
                }
                self.add_grad(grads, *logits, dl);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn contract_backward(
        &self,
        w: NodeId,
        u: NodeId,
        v: NodeId,
        spans: &[Span],
        plan: &ContractPlan,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let wt = self.value(w);
        let (r, a, b, c) = match wt.shape() {
            &[r, a, b, c] => (r, a, b, c),
            _ => unreachable!(),
        };
        let (ut, vt) = (self.value(u), self.value(v));
        let ni = plan.starts.len();
        let ns = spans.len();
        let bc = b * c;
        let mut dpartial = vec![0.0; r * ni * bc];
        let mut dv = vec![0.0; vt.len()];
        let mut gsel = Vec::new();
        let mut vsel = Vec::new();
        let mut dvsel = Vec::new();
        for (p, group) in plan.groups.iter().enumerate() {
            vsel.clear();
            for &si in group {
                vsel.extend_from_slice(vt.row(spans[si].end));
            }
            for ri in 0..r {
                gsel.clear();
                for &si in group {
                    gsel.extend_from_slice(&g[(ri * ns + si) * b..(ri * ns + si + 1) * b]);
                }
                let nj = group.len();
                let off = (ri * ni + p) * bc;
                gemm(1.0, Mat::rm(&gsel, nj, b).t(), Mat::rm(&vsel, nj, c), 0.0, &mut dpartial[off..off + bc]);
                dvsel.resize(nj * c, 0.0);
                gemm(1.0, Mat::rm(&gsel, nj, b), Mat::rm(&plan.partial[off..off + bc], b, c), 0.0, &mut dvsel);
                for (k, &si) in group.iter().enumerate() {
                    let j = spans[si].end;
                    axpy(1.0, &dvsel[k * c..(k + 1) * c], &mut dv[j * c..(j + 1) * c]);
                }
            }
        }
        let mut ustack = Vec::with_capacity(ni * a);
        for &i in &plan.starts {
            ustack.extend_from_slice(ut.row(i));
        }
        if self.nodes[w.0].requires_grad {
            let mut dw = vec![0.0; wt.len()];
            for ri in 0..r {
                gemm(
                    1.0,
                    Mat::rm(&ustack, ni, a).t(),
                    Mat::rm(&dpartial[ri * ni * bc..(ri + 1) * ni * bc], ni, bc),
                    0.0,
                    &mut dw[ri * a * bc..(ri + 1) * a * bc],
                );
            }
            self.add_grad(grads, w, dw);
        }
        if self.nodes[u.0].requires_grad {
            let mut dustack = vec![0.0; ni * a];
            for ri in 0..r {
                gemm(
                    1.0,
                    Mat::rm(&dpartial[ri * ni * bc..(ri + 1) * ni * bc], ni, bc),
                    Mat::rm(&wt.data()[ri * a * bc..(ri + 1) * a * bc], a, bc).t(),
                    1.0,
                    &mut dustack,
                );
            }
            let mut du = vec![0.0; ut.len()];
            for (p, &i) in plan.starts.iter().enumerate() {
                axpy(1.0, &dustack[p * a..(p + 1) * a], &mut du[i * a..(i + 1) * a]);
            }
            self.add_grad(grads, u, du);
        }
        self.add_grad(grads, v, dv);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_tape_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(2024)
    }

    fn spans(n: usize) -> Arc<[Span]> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in i..n {
                v.push(Span::new(i, j));
            }
        }
        v.into()
    }

    #[test]
    fn boundary_contract_matches_loops() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng));
        let u = store.add("u", Tensor::randn(&[3, 3], 1.0, &mut rng));
        let v = store.add("v", Tensor::randn(&[3, 3], 1.0, &mut rng));
        let mut tape = Tape::new(&store);
        let (wn, un, vn) = (tape.param(w), tape.param(u), tape.param(v));
        let sp = spans(3);
        let out = tape.boundary_contract(wn, un, vn, sp.clone()).unwrap();
        let got = tape.value(out);
        let (wt, ut, vt) = (store.get(w), store.get(u), store.get(v));
        for r in 0..2 {
            for (si, s) in sp.iter().enumerate() {
                for b in 0..4 {
                    let mut e = 0.0;
                    for a in 0..3 {
                        for c in 0..3 {
                            e += wt.at(&[r, a, b, c]) * ut.at(&[s.start, a]) * vt.at(&[s.end, c]);
                        }
                    }
                    assert!((got.at(&[r, si, b]) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let unused = store.add("b", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new(&store);
        let x = tape.param(a);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.dense(unused).data(), &[0.0]);
        assert_eq!(grads.dense(a).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let mut tape = Tape::new(&store);
        let x = tape.param(a);
        let y = tape.tanh(x);
        let z = tape.mul(y, x).unwrap();
        let w = tape.add(z, y).unwrap();
        let loss = tape.sum(w);
        let stats = tape.backward_into(loss, 1.0, &mut Gradients::zeros_like(&store)).unwrap();
        assert_eq!(stats.recorded, tape.len());
        assert_eq!(stats.visited, tape.len());
    }

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.add(*name, Tensor::randn(shape, 1.0, rng));
        }
        store
    }

    #[test]
    fn elementary_ops_pass_gradcheck() {
        let mut rng = rng();
        let store =
            random_store(&mut rng, &[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[2]), ("d", &[5, 4]), ("t", &[6, 4])]);
        let f = |tape: &mut Tape| -> Result<NodeId> {
            let ids: Vec<_> = tape.store().ids().collect();
            let (a, b, c, d, t) =
                (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]), tape.param(ids[3]), tape.param(ids[4]));
            let ab = tape.matmul(a, b)?;
            let abc = tape.add_bias(ab, c)?;
            let s = tape.sigmoid(abc);
            let th = tape.tanh(abc);
            let m = tape.mul(s, th)?;
            let ad = tape.matmul_nt(a, d)?;
            let re = tape.activation(ad, Activation::Relu);
            let one = tape.append_one(m)?;
            let cat = tape.concat_cols(&[one, re])?;
            let r0 = tape.slice_rows(cat, 1, 2)?;
            let c0 = tape.slice_cols(r0, 2, 4)?;
            let emb = tape.gather_rows(t, &[0, 3, 3, 5])?;
            let e2 = tape.slice_cols(emb, 0, 4)?;
            let e3 = tape.slice_rows(e2, 0, 2)?;
            let mixed = tape.sub(c0, e3)?;
            let masked = tape.mask(mixed, vec![1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 0.5, 1.0])?;
            let stacked = tape.stack_rows(&[c, c])?;
            let st = tape.reshape(stacked, &[4])?;
            let sst = tape.sum(st);
            let sc = tape.scale(sst, 0.3);
            let sm = tape.sum(masked);
            let tot = tape.add(sm, sc)?;
            Ok(tot)
        };
        let err = check_tape_gradients(&store, f, &GradCheckConfig::default()).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn span_ops_pass_gradcheck() {
        let mut rng = rng();
        let n = 4;
        let store = random_store(
            &mut rng,
            &[
                ("w", &[2, 3, 2, 3]),
                ("u", &[n, 3]),
                ("v", &[n, 3]),
                ("k", &[1, n, 2]),
                ("val", &[2, n, 2]),
                ("bias", &[2]),
                ("z", &[2, n]),
                ("zj", &[2, n]),
            ],
        );
        let sp = spans(n);
        let seg = Arc::new(Segments::for_spans(&sp, n));
        let gold: Vec<usize> = (0..sp.len()).map(|s| s % 2).collect();
        let f = |tape: &mut Tape| -> Result<NodeId> {
            let ids: Vec<_> = tape.store().ids().collect();
            let p: Vec<NodeId> = ids.iter().map(|&i| tape.param(i)).collect();
            let c = tape.boundary_contract(p[0], p[1], p[2], sp.clone())?;
            let s = tape.seg_item_dot(c, p[3], seg.clone())?;
            let zs = tape.item_gather(p[6], seg.clone())?;
            let bp = tape.boundary_pair(p[6], p[7], sp.clone())?;
            let bb = tape.seg_broadcast(bp, seg.clone())?;
            let s2 = tape.add(s, zs)?;
            let s3 = tape.add(s2, bb)?;
            let s4 = tape.add_label_bias(s3, p[5])?;
            let alpha = tape.seg_softmax(s4, seg.clone())?;
            let all: Arc<[usize]> = (0..seg.len()).collect();
            let h = tape.seg_weighted_sum(alpha, p[4], seg.clone(), all)?;
            let o = tape.seg_item_dot(c, p[4], seg.clone())?;
            let dec = tape.seg_dot(alpha, o, seg.clone())?;
            let naive = tape.label_dot(c, h)?;
            let both = tape.add(dec, naive)?;
            let sub = tape.span_gather(h, &[0, 3, 5])?;
            let subsum = tape.sum(sub);
            let ce = tape.span_cross_entropy(both, &gold)?;
            tape.add(ce, subsum)
        };
        let err = check_tape_gradients(&store, f, &GradCheckConfig::default()).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
