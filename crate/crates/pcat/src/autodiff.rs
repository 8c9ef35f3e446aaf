//! Reverse-mode automatic differentiation.
//!
//! [`Node`] wraps an eagerly-computed [`Tensor`] value plus the operation
//! that produced it. Calling [`Node::backward`] on a scalar walks the graph
//! in reverse topological order and accumulates gradients into every
//! reachable node. Graphs are single-threaded (`Rc`); run independent graphs
//! on independent threads for batch parallelism.
//!
//! Conventions:
//! - `relu` gradient at 0 is 0.
//! - `reduce_max` / `group_max` route the gradient to the lowest tied index.
//! - Broadcasting is limited to `add_bias` (row vector over the leading axis)
//!   and `scale_rows` (per-row scalar).
//! - Repeated `backward` calls without [`Node::clear_grad`] accumulate.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{matmul_into, softmax_lane, transpose_into, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Per-output-row weighted sum over input rows: `(row index, weight)` pairs.
pub type WeightedRows<T> = Vec<Vec<(usize, T)>>;

enum Op<T: Float> {
    Leaf { trainable: bool },
    Matmul(Node<T>, Node<T>),
    Transpose(Node<T>),
    Add(Node<T>, Node<T>),
    AddBias(Node<T>, Node<T>),
    Neg(Node<T>),
    Mul(Node<T>, Node<T>),
    Scale(Node<T>, T),
    Relu(Node<T>),
    Log(Node<T>),
    ClampMin(Node<T>, T),
    Softmax(Node<T>, usize),
    RowNorm(Node<T>, T),
    Concat(Vec<Node<T>>, usize),
    Slice {
        input: Node<T>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Node<T>),
    ReduceMax(Node<T>, usize),
    ReduceMean(Node<T>, Option<usize>),
    ReduceSum(Node<T>, Option<usize>),
    /// Row gather; `None` produces a zero row and receives no gradient.
    GatherRows(Node<T>, Rc<Vec<Option<usize>>>),
    /// `y[r, c] = x[r, c] * s[r]`, differentiable in both arguments.
    ScaleRows(Node<T>, Node<T>),
    GroupMax(Node<T>, Rc<Vec<Vec<usize>>>),
    GroupSum(Node<T>, Rc<Vec<Vec<usize>>>),
    /// Constant-weight sparse row mixing: `y[r] = Σ w · x[i]`.
    WeightedGather(Node<T>, Rc<WeightedRows<T>>),
}

struct NodeInner<T: Float> {
    id: u64,
    value: Tensor<T>,
    grad: RefCell<Option<Tensor<T>>>,
    op: Op<T>,
}

pub struct Node<T: Float> {
    inner: Rc<NodeInner<T>>,
}

impl<T: Float> Clone for Node<T> {
    fn clone(&self) -> Self {
        Node {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Float> std::fmt::Debug for Node<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.value.shape())
            .finish_non_exhaustive()
    }
}

impl<T: Float> Node<T> {
    fn wrap(value: Tensor<T>, op: Op<T>) -> Node<T> {
        Node {
            inner: Rc::new(NodeInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Trainable leaf (a parameter).
    pub fn leaf(value: Tensor<T>) -> Node<T> {
        Node::wrap(value, Op::Leaf { trainable: true })
    }

    /// Non-trainable leaf (input data, geometry constants).
    pub fn constant(value: Tensor<T>) -> Node<T> {
        Node::wrap(value, Op::Leaf { trainable: false })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn is_trainable_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf { trainable: true })
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn inputs(&self) -> Vec<Node<T>> {
        match &self.inner.op {
            Op::Leaf { .. } => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b) => vec![a.clone(), b.clone()],
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a, _)
            | Op::RowNorm(a, _)
            | Op::Slice { input: a, .. }
            | Op::Reshape(a)
            | Op::ReduceMax(a, _)
            | Op::ReduceMean(a, _)
            | Op::ReduceSum(a, _)
            | Op::GatherRows(a, _)
            | Op::GroupMax(a, _)
            | Op::GroupSum(a, _)
            | Op::WeightedGather(a, _) => vec![a.clone()],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Node<T>) -> Result<Node<T>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
        Ok(Node::wrap(out, Op::Matmul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Node<T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose expects rank 2, got {:?}",
                a.shape()
            )));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = Tensor::zeros(&[c, r]);
        transpose_into(a.data(), out.data_mut(), r, c);
        Ok(Node::wrap(out, Op::Transpose(self.clone())))
    }

    pub fn add(&self, rhs: &Node<T>) -> Result<Node<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = self
            .value()
            .data()
            .iter()
            .zip(rhs.value().data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape().to_vec(), data).expect("same shape");
        Ok(Node::wrap(out, Op::Add(self.clone(), rhs.clone())))
    }

    /// `[R×C] + [C]`, the one sanctioned broadcast.
    pub fn add_bias(&self, bias: &Node<T>) -> Result<Node<T>> {
        let x = self.value();
        let b = bias.value();
        if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = x.shape()[1];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % c])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        Ok(Node::wrap(out, Op::AddBias(self.clone(), bias.clone())))
    }

    pub fn neg(&self) -> Node<T> {
        let out = self.value().map(|v| -v);
        Node::wrap(out, Op::Neg(self.clone()))
    }

    pub fn mul(&self, rhs: &Node<T>) -> Result<Node<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = self
            .value()
            .data()
            .iter()
            .zip(rhs.value().data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape().to_vec(), data).expect("same shape");
        Ok(Node::wrap(out, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn scale(&self, s: T) -> Node<T> {
        let out = self.value().map(|v| v * s);
        Node::wrap(out, Op::Scale(self.clone(), s))
    }

    pub fn relu(&self) -> Node<T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        Node::wrap(out, Op::Relu(self.clone()))
    }

    /// Natural log; caller is responsible for positive inputs
    /// (compose with [`Node::clamp_min`] where zeros can occur).
    pub fn log(&self) -> Node<T> {
        let out = self.value().map(|v| v.ln());
        Node::wrap(out, Op::Log(self.clone()))
    }

    pub fn clamp_min(&self, c: T) -> Node<T> {
        let out = self.value().map(|v| if v < c { c } else { v });
        Node::wrap(out, Op::ClampMin(self.clone(), c))
    }

    pub fn softmax(&self, axis: usize) -> Result<Node<T>> {
        let x = self.value();
        check_axis("softmax", x, axis)?;
        let mut out = Tensor::zeros(x.shape());
        for lane in lanes(x.shape(), axis) {
            let xv = lane.read(x.data());
            let mut ov = vec![T::zero(); xv.len()];
            softmax_lane(&xv, &mut ov);
            lane.write(out.data_mut(), &ov);
        }
        Ok(Node::wrap(out, Op::Softmax(self.clone(), axis)))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`; the optional
    /// pre-norm path in the attention units.
    pub fn row_norm(&self, eps: T) -> Result<Node<T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::invalid(format!(
                "row_norm expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let cn = T::of_usize(c);
        let mut out = Tensor::zeros(x.shape());
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let inv = (var + eps).sqrt().recip();
            for (o, &v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        Ok(Node::wrap(out, Op::RowNorm(self.clone(), eps)))
    }

    pub fn concat(parts: &[Node<T>], axis: usize) -> Result<Node<T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let first = parts[0].value();
        check_axis("concat", first, axis)?;
        let rank = first.rank();
        for p in parts {
            let s = p.value().shape();
            let ok = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == first.shape()[d]);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let out = if rank == 1 || axis == 0 {
            // stack along rows: contiguous append
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(p.value().data());
            }
            let mut shape = first.shape().to_vec();
            shape[0] = parts.iter().map(|p| p.value().shape()[0]).sum();
            Tensor::new(shape, data).expect("concat shape")
        } else {
            let rows = first.shape()[0];
            let total_c: usize = parts.iter().map(|p| p.value().shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * total_c);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.value().row(i));
                }
            }
            Tensor::new(vec![rows, total_c], data).expect("concat shape")
        };
        Ok(Node::wrap(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Node<T>> {
        let x = self.value();
        check_axis("slice", x, axis)?;
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of bounds for axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let out = if x.rank() == 1 || axis == 0 {
            let c = if x.rank() == 1 { 1 } else { x.shape()[1] };
            let data = x.data()[start * c..(start + len) * c].to_vec();
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(shape, data).expect("slice shape")
        } else {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data).expect("slice shape")
        };
        Ok(Node::wrap(
            out,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
                len,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Node<T>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value().numel() {
            return Err(Error::invalid(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), self.value().data().to_vec()).expect("reshape");
        Ok(Node::wrap(out, Op::Reshape(self.clone())))
    }

    /// Max over `axis`; ties resolve to the lowest index on backward.
    pub fn reduce_max(&self, axis: usize) -> Result<Node<T>> {
        let x = self.value();
        check_axis("reduce_max", x, axis)?;
        let mut out_lanes = Vec::new();
        for lane in lanes(x.shape(), axis) {
            let xv = lane.read(x.data());
            let mut m = xv[0];
            for &v in &xv[1..] {
                if v > m {
                    m = v;
                }
            }
            out_lanes.push(m);
        }
        let out = reduced_tensor(x.shape(), axis, out_lanes);
        Ok(Node::wrap(out, Op::ReduceMax(self.clone(), axis)))
    }

    /// Mean over `axis`, or over all elements when `axis` is `None`.
    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Node<T>> {
        let x = self.value();
        let out = match axis {
            None => Tensor::scalar(
                x.data().iter().copied().sum::<T>() / T::of_usize(x.numel()),
            ),
            Some(ax) => {
                check_axis("reduce_mean", x, ax)?;
                let mut vals = Vec::new();
                for lane in lanes(x.shape(), ax) {
                    let xv = lane.read(x.data());
                    vals.push(xv.iter().copied().sum::<T>() / T::of_usize(xv.len()));
                }
                reduced_tensor(x.shape(), ax, vals)
            }
        };
        Ok(Node::wrap(out, Op::ReduceMean(self.clone(), axis)))
    }

    /// Sum over `axis`, or over all elements when `axis` is `None`.
    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Node<T>> {
        let x = self.value();
        let out = match axis {
            None => Tensor::scalar(x.data().iter().copied().sum::<T>()),
            Some(ax) => {
                check_axis("reduce_sum", x, ax)?;
                let mut vals = Vec::new();
                for lane in lanes(x.shape(), ax) {
                    let xv = lane.read(x.data());
                    vals.push(xv.iter().copied().sum::<T>());
                }
                reduced_tensor(x.shape(), ax, vals)
            }
        };
        Ok(Node::wrap(out, Op::ReduceSum(self.clone(), axis)))
    }

    /// Select rows of a rank-2 tensor; `None` entries produce zero rows.
    pub fn gather_rows(&self, indices: Vec<Option<usize>>) -> Result<Node<T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::invalid(format!(
                "gather_rows expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range 0..{r}"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for idx in &indices {
            match idx {
                Some(i) => data.extend_from_slice(x.row(*i)),
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let out = Tensor::new(vec![indices.len(), c], data).expect("gather shape");
        Ok(Node::wrap(out, Op::GatherRows(self.clone(), Rc::new(indices))))
    }

    /// Scale row `r` of a rank-2 tensor by scalar `s[r]` (rank-1, length R).
    pub fn scale_rows(&self, s: &Node<T>) -> Result<Node<T>> {
        let x = self.value();
        let sv = s.value();
        if x.rank() != 2 || sv.rank() != 1 || sv.shape()[0] != x.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let si = sv.data()[i];
            data.extend(x.row(i).iter().map(|&v| v * si));
        }
        let out = Tensor::new(vec![r, c], data).expect("scale_rows shape");
        Ok(Node::wrap(out, Op::ScaleRows(self.clone(), s.clone())))
    }

    /// Column-wise max over arbitrary row groups; empty groups yield zero
    /// rows. Ties route the gradient to the lowest row index in the group.
    pub fn group_max(&self, groups: Vec<Vec<usize>>) -> Result<Node<T>> {
        let x = self.value();
        validate_groups("group_max", x, &groups)?;
        let c = x.shape()[1];
        let mut data = Vec::with_capacity(groups.len() * c);
        for g in &groups {
            if g.is_empty() {
                data.extend(std::iter::repeat_n(T::zero(), c));
                continue;
            }
            for j in 0..c {
                let mut m = x.data()[g[0] * c + j];
                for &i in &g[1..] {
                    let v = x.data()[i * c + j];
                    if v > m {
                        m = v;
                    }
                }
                data.push(m);
            }
        }
        let out = Tensor::new(vec![groups.len(), c], data).expect("group shape");
        Ok(Node::wrap(out, Op::GroupMax(self.clone(), Rc::new(groups))))
    }

    /// Column-wise sum over arbitrary row groups.
    pub fn group_sum(&self, groups: Vec<Vec<usize>>) -> Result<Node<T>> {
        let x = self.value();
        validate_groups("group_sum", x, &groups)?;
        let c = x.shape()[1];
        let mut data = vec![T::zero(); groups.len() * c];
        for (gi, g) in groups.iter().enumerate() {
            for &i in g {
                for j in 0..c {
                    data[gi * c + j] += x.data()[i * c + j];
                }
            }
        }
        let out = Tensor::new(vec![groups.len(), c], data).expect("group shape");
        Ok(Node::wrap(out, Op::GroupSum(self.clone(), Rc::new(groups))))
    }

    /// Sparse constant-weight row mixing: output row `r` is
    /// `Σ_(i,w) in rows[r] w · x[i]`. Used for the fixed-geometry
    /// interpolation in the segmentation decoder.
    pub fn weighted_gather(&self, rows: WeightedRows<T>) -> Result<Node<T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::invalid(format!(
                "weighted_gather expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if rows.is_empty() {
            return Err(Error::invalid("weighted_gather: empty row list"));
        }
        if let Some((bad, _)) = rows.iter().flatten().find(|&&(i, _)| i >= r) {
            return Err(Error::invalid(format!(
                "weighted_gather: index {bad} out of range 0..{r}"
            )));
        }
        let mut data = vec![T::zero(); rows.len() * c];
        for (ri, mix) in rows.iter().enumerate() {
            for &(i, w) in mix {
                for j in 0..c {
                    data[ri * c + j] += x.data()[i * c + j] * w;
                }
            }
        }
        let out = Tensor::new(vec![rows.len(), c], data).expect("weighted shape");
        Ok(Node::wrap(
            out,
            Op::WeightedGather(self.clone(), Rc::new(rows)),
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar. Gradients of every reachable node
    /// accumulate into its gradient slot; call repeatedly to sum passes.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        let mut flows: HashMap<u64, Tensor<T>> = HashMap::new();
        flows.insert(self.id(), Tensor::scalar(T::one()));
        for node in order.iter().rev() {
            let Some(g) = flows.get(&node.id()).cloned() else {
                continue;
            };
            node.backprop(&g, &mut flows);
        }
        for node in &order {
            if let Some(g) = flows.remove(&node.id()) {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.axpy(&g, T::one()),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Node<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Node<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for input in node.inputs() {
                stack.push((input, false));
            }
        }
        order
    }

    fn backprop(&self, g: &Tensor<T>, flows: &mut HashMap<u64, Tensor<T>>) {
        match &self.inner.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // da = g · bᵀ
                let mut bt = vec![T::zero(); k * n];
                transpose_into(b.value().data(), &mut bt, k, n);
                let mut da = Tensor::zeros(&[m, k]);
                matmul_into(g.data(), &bt, da.data_mut(), m, n, k);
                add_flow(flows, a, da);
                // db = aᵀ · g
                let mut at = vec![T::zero(); m * k];
                transpose_into(a.value().data(), &mut at, m, k);
                let mut db = Tensor::zeros(&[k, n]);
                matmul_into(&at, g.data(), db.data_mut(), k, m, n);
                add_flow(flows, b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let mut da = Tensor::zeros(&[r, c]);
                transpose_into(g.data(), da.data_mut(), c, r);
                add_flow(flows, a, da);
            }
            Op::Add(a, b) => {
                add_flow(flows, a, g.clone());
                add_flow(flows, b, g.clone());
            }
            Op::AddBias(a, bias) => {
                add_flow(flows, a, g.clone());
                let c = a.shape()[1];
                let mut db = Tensor::zeros(&[c]);
                for (i, &v) in g.data().iter().enumerate() {
                    db.data_mut()[i % c] += v;
                }
                add_flow(flows, bias, db);
            }
            Op::Neg(a) => add_flow(flows, a, g.map(|v| -v)),
            Op::Mul(a, b) => {
                let da = zip_tensor(g, b.value(), |gv, bv| gv * bv);
                let db = zip_tensor(g, a.value(), |gv, av| gv * av);
                add_flow(flows, a, da);
                add_flow(flows, b, db);
            }
            Op::Scale(a, s) => add_flow(flows, a, g.map(|v| v * *s)),
            Op::Relu(a) => {
                let da = zip_tensor(g, a.value(), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                add_flow(flows, a, da);
            }
            Op::Log(a) => {
                let da = zip_tensor(g, a.value(), |gv, xv| gv / xv);
                add_flow(flows, a, da);
            }
            Op::ClampMin(a, c) => {
                let da = zip_tensor(g, a.value(), |gv, xv| {
                    if xv > *c {
                        gv
                    } else {
                        T::zero()
                    }
                });
                add_flow(flows, a, da);
            }
            Op::Softmax(a, axis) => {
                let y = self.value();
                let mut da = Tensor::zeros(a.shape());
                for lane in lanes(a.shape(), *axis) {
                    let yv = lane.read(y.data());
                    let gv = lane.read(g.data());
                    let dot: T = yv.iter().zip(gv.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    let dv: Vec<T> = yv
                        .iter()
                        .zip(gv.iter())
                        .map(|(&yi, &gi)| yi * (gi - dot))
                        .collect();
                    lane.write(da.data_mut(), &dv);
                }
                add_flow(flows, a, da);
            }
            Op::RowNorm(a, eps) => {
                let x = a.value();
                let y = self.value();
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let cn = T::of_usize(c);
                let mut da = Tensor::zeros(x.shape());
                for i in 0..r {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let mean = row.iter().copied().sum::<T>() / cn;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
                    let inv = (var + *eps).sqrt().recip();
                    let gmean = grow.iter().copied().sum::<T>() / cn;
                    let gydot = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gi, &yi)| gi * yi)
                        .sum::<T>()
                        / cn;
                    for j in 0..c {
                        da.data_mut()[i * c + j] =
                            inv * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
                add_flow(flows, a, da);
            }
            Op::Concat(parts, axis) => {
                if parts[0].value().rank() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let n = p.value().numel();
                        let dp = Tensor::new(
                            p.shape().to_vec(),
                            g.data()[offset..offset + n].to_vec(),
                        )
                        .expect("concat grad");
                        add_flow(flows, p, dp);
                        offset += n;
                    }
                } else {
                    let rows = parts[0].shape()[0];
                    let total_c = g.shape()[1];
                    let mut col = 0;
                    for p in parts {
                        let pc = p.shape()[1];
                        let mut dp = Tensor::zeros(p.shape());
                        for i in 0..rows {
                            dp.data_mut()[i * pc..(i + 1) * pc].copy_from_slice(
                                &g.data()[i * total_c + col..i * total_c + col + pc],
                            );
                        }
                        add_flow(flows, p, dp);
                        col += pc;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let x = input.value();
                let mut dx = Tensor::zeros(x.shape());
                if x.rank() == 1 || *axis == 0 {
                    let c = if x.rank() == 1 { 1 } else { x.shape()[1] };
                    dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                } else {
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    for i in 0..r {
                        dx.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                }
                add_flow(flows, input, dx);
            }
            Op::Reshape(a) => {
                let da = Tensor::new(a.shape().to_vec(), g.data().to_vec())
                    .expect("reshape grad");
                add_flow(flows, a, da);
            }
            Op::ReduceMax(a, axis) => {
                let x = a.value();
                let mut da = Tensor::zeros(x.shape());
                for (li, lane) in lanes(x.shape(), *axis).into_iter().enumerate() {
                    let xv = lane.read(x.data());
                    let mut arg = 0;
                    for (i, &v) in xv.iter().enumerate() {
                        if v > xv[arg] {
                            arg = i;
                        }
                    }
                    let pos = lane.element_offset(arg);
                    da.data_mut()[pos] += g.data()[li];
                }
                add_flow(flows, a, da);
            }
            Op::ReduceMean(a, axis) => {
                let x = a.value();
                let mut da = Tensor::zeros(x.shape());
                match axis {
                    None => {
                        let s = g.item() / T::of_usize(x.numel());
                        for v in da.data_mut() {
                            *v = s;
                        }
                    }
                    Some(ax) => {
                        for (li, lane) in lanes(x.shape(), *ax).into_iter().enumerate() {
                            let n = T::of_usize(lane.len);
                            let s = g.data()[li] / n;
                            for i in 0..lane.len {
                                da.data_mut()[lane.element_offset(i)] += s;
                            }
                        }
                    }
                }
                add_flow(flows, a, da);
            }
            Op::ReduceSum(a, axis) => {
                let x = a.value();
                let mut da = Tensor::zeros(x.shape());
                match axis {
                    None => {
                        let s = g.item();
                        for v in da.data_mut() {
                            *v = s;
                        }
                    }
                    Some(ax) => {
                        for (li, lane) in lanes(x.shape(), *ax).into_iter().enumerate() {
                            let s = g.data()[li];
                            for i in 0..lane.len {
                                da.data_mut()[lane.element_offset(i)] += s;
                            }
                        }
                    }
                }
                add_flow(flows, a, da);
            }
            Op::GatherRows(a, indices) => {
                let c = a.shape()[1];
                let mut da = Tensor::zeros(a.shape());
                for (r, idx) in indices.iter().enumerate() {
                    if let Some(i) = idx {
                        for j in 0..c {
                            da.data_mut()[i * c + j] += g.data()[r * c + j];
                        }
                    }
                }
                add_flow(flows, a, da);
            }
            Op::ScaleRows(a, s) => {
                let x = a.value();
                let sv = s.value();
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut da = Tensor::zeros(x.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for i in 0..r {
                    let si = sv.data()[i];
                    let mut acc = T::zero();
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        da.data_mut()[i * c + j] = gij * si;
                        acc += gij * x.data()[i * c + j];
                    }
                    ds.data_mut()[i] = acc;
                }
                add_flow(flows, a, da);
                add_flow(flows, s, ds);
            }
            Op::GroupMax(a, groups) => {
                let x = a.value();
                let c = x.shape()[1];
                let mut da = Tensor::zeros(x.shape());
                for (gi, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    for j in 0..c {
                        let mut arg = group[0];
                        for &i in &group[1..] {
                            if x.data()[i * c + j] > x.data()[arg * c + j] {
                                arg = i;
                            }
                        }
                        da.data_mut()[arg * c + j] += g.data()[gi * c + j];
                    }
                }
                add_flow(flows, a, da);
            }
            Op::GroupSum(a, groups) => {
                let x = a.value();
                let c = x.shape()[1];
                let mut da = Tensor::zeros(x.shape());
                for (gi, group) in groups.iter().enumerate() {
                    for &i in group {
                        for j in 0..c {
                            da.data_mut()[i * c + j] += g.data()[gi * c + j];
                        }
                    }
                }
                add_flow(flows, a, da);
            }
            Op::WeightedGather(a, rows) => {
                let c = a.shape()[1];
                let mut da = Tensor::zeros(a.shape());
                for (ri, mix) in rows.iter().enumerate() {
                    for &(i, w) in mix {
                        for j in 0..c {
                            da.data_mut()[i * c + j] += g.data()[ri * c + j] * w;
                        }
                    }
                }
                add_flow(flows, a, da);
            }
        }
    }
}

fn add_flow<T: Float>(flows: &mut HashMap<u64, Tensor<T>>, node: &Node<T>, g: Tensor<T>) {
    match flows.entry(node.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            e.get_mut().axpy(&g, T::one());
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn zip_tensor<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip shape")
}

fn validate_groups<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    groups: &[Vec<usize>],
) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!(
            "{op} expects rank 2, got {:?}",
            x.shape()
        )));
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!("{op}: no groups")));
    }
    let r = x.shape()[0];
    if let Some(bad) = groups.iter().flatten().find(|&&i| i >= r) {
        return Err(Error::invalid(format!(
            "{op}: row index {bad} out of range 0..{r}"
        )));
    }
    Ok(())
}

fn check_axis<T: Float>(op: &'static str, x: &Tensor<T>, axis: usize) -> Result<()> {
    let rank = x.rank();
    if rank > 2 {
        return Err(Error::invalid(format!(
            "{op}: rank {rank} unsupported (max 2)"
        )));
    }
    if axis >= rank {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// A contiguous-or-strided 1-D view used by axis reductions and softmax.
struct Lane {
    start: usize,
    stride: usize,
    len: usize,
}

impl Lane {
    fn read<T: Copy>(&self, data: &[T]) -> Vec<T> {
        (0..self.len)
            .map(|i| data[self.start + i * self.stride])
            .collect()
    }
    fn write<T: Copy>(&self, data: &mut [T], vals: &[T]) {
        for (i, &v) in vals.iter().enumerate() {
            data[self.start + i * self.stride] = v;
        }
    }
    fn element_offset(&self, i: usize) -> usize {
        self.start + i * self.stride
    }
}

/// Lanes along `axis` in output order: for rank-2 axis 0 this yields one
/// lane per column, for axis 1 one per row; rank-1 yields a single lane.
fn lanes(shape: &[usize], axis: usize) -> Vec<Lane> {
    match shape.len() {
        1 => vec![Lane {
            start: 0,
            stride: 1,
            len: shape[0],
        }],
        2 => {
            let (r, c) = (shape[0], shape[1]);
            if axis == 0 {
                (0..c)
                    .map(|j| Lane {
                        start: j,
                        stride: c,
                        len: r,
                    })
                    .collect()
            } else {
                (0..r)
                    .map(|i| Lane {
                        start: i * c,
                        stride: 1,
                        len: c,
                    })
                    .collect()
            }
        }
        _ => unreachable!("check_axis rejects rank > 2"),
    }
}

fn reduced_tensor<T: Float>(shape: &[usize], axis: usize, vals: Vec<T>) -> Tensor<T> {
    let out_shape = match shape.len() {
        1 => vec![1],
        2 => {
            if axis == 0 {
                vec![shape[1]]
            } else {
                vec![shape[0]]
            }
        }
        _ => unreachable!(),
    };
    Tensor::new(out_shape, vals).expect("reduced shape")
}

/// Central finite differences and comparison helpers for gradient checks.
pub mod fd {
    use super::*;

    /// Central finite-difference gradient of `f` w.r.t. every element of
    /// `inputs`, at the given step size.
    pub fn finite_difference<T: Float>(
        f: &mut dyn FnMut(&[Tensor<T>]) -> Result<T>,
        inputs: &[Tensor<T>],
        step: T,
    ) -> Result<Vec<Tensor<T>>> {
        let mut grads = Vec::with_capacity(inputs.len());
        let two = T::of(2.0);
        for which in 0..inputs.len() {
            let mut g = Tensor::zeros(inputs[which].shape());
            for e in 0..inputs[which].numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += step;
                let fp = f(&plus)?;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= step;
                let fm = f(&minus)?;
                g.data_mut()[e] = (fp - fm) / (two * step);
            }
            grads.push(g);
        }
        Ok(grads)
    }

    /// Worst relative error between two gradients, with an absolute floor
    /// below which disagreement is ignored.
    pub fn max_rel_err<T: Float>(got: &Tensor<T>, want: &Tensor<T>, floor: T) -> T {
        let mut worst = T::zero();
        for (&a, &b) in got.data().iter().zip(want.data().iter()) {
            let denom = a.abs().max(b.abs());
            if denom < floor {
                continue;
            }
            let rel = (a - b).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Node::constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = Node::constant(t2(&[vec![3.0, -1.0], vec![2.5, 7.0]]));
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Node::constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = Node::constant(t2(&[vec![1.0], vec![1.0]]));
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Node::constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = Node::constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Node::constant(Tensor::<f64>::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = x.softmax(0).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let x = Node::constant(Tensor::<f64>::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = x.softmax(0).unwrap();
        assert!(y.value().data().iter().all(|v| v.is_finite()));
        assert!((y.value().data()[0] - 1.0).abs() < 1e-300);
    }

    #[test]
    fn relu_gradient_convention() {
        for (x, want) in [(-2.0, 0.0), (3.0, 1.0), (0.0, 0.0)] {
            let leaf = Node::leaf(Tensor::scalar(x));
            let loss = leaf.relu().reduce_sum(None).unwrap();
            loss.backward().unwrap();
            assert_eq!(leaf.grad().unwrap().item(), want, "x = {x}");
        }
    }

    #[test]
    fn reduce_max_tie_routes_to_lowest_index() {
        let leaf = Node::leaf(Tensor::new(vec![4], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        let loss = leaf.reduce_max(0).unwrap().reduce_sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(leaf.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_max_tie_routes_to_lowest_group_row() {
        let leaf = Node::leaf(t2(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 9.0]]));
        let loss = leaf
            .group_max(vec![vec![0, 1, 2]])
            .unwrap()
            .reduce_sum(None)
            .unwrap();
        loss.backward().unwrap();
        // col 0 max is row 0 (tie with row 1), col 1 max is row 2
        assert_eq!(
            leaf.grad().unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn concat_along_features() {
        let a = Node::constant(t2(&[vec![1.0], vec![3.0]]));
        let b = Node::constant(t2(&[vec![2.0], vec![4.0]]));
        let out = Node::concat(&[a, b], 1).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Node::leaf(Tensor::<f64>::zeros(&[2, 2]));
        assert!(x.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Node::leaf(Tensor::scalar(3.0));
        let loss = x.scale(2.0);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 4.0);
        x.clear_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 2.0);
    }

    #[test]
    fn shared_subgraph_accumulates_within_one_pass() {
        // loss = x*2 + x*3 → dx = 5, not double-counted
        let x = Node::leaf(Tensor::scalar(1.0));
        let loss = x.scale(2.0).add(&x.scale(3.0)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
    }

    #[test]
    fn every_reachable_node_gets_a_full_shape_gradient() {
        let x = Node::leaf(t2(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let w = Node::leaf(t2(&[vec![0.3], vec![-0.7]]));
        let mid = x.matmul(&w).unwrap();
        let act = mid.relu();
        let loss = act.reduce_sum(None).unwrap();
        loss.backward().unwrap();
        for node in [&x, &w, &mid, &act, &loss] {
            let g = node.grad().expect("reachable node has a gradient");
            assert_eq!(g.shape(), node.value().shape());
        }
    }

    #[test]
    fn gradient_linearity_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let build = |v: &[f64]| {
                let x = Node::leaf(Tensor::new(vec![2, 3], v.to_vec()).unwrap());
                let f = x.relu().reduce_sum(None).unwrap();
                let g = x.mul(&x).unwrap().reduce_mean(None).unwrap();
                (x, f, g)
            };
            // backward(f + g)
            let (x1, f1, g1) = build(&data);
            f1.add(&g1).unwrap().backward().unwrap();
            // backward(f) then backward(g)
            let (x2, f2, g2) = build(&data);
            f2.backward().unwrap();
            g2.backward().unwrap();
            let a = x1.grad().unwrap();
            let b = x2.grad().unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fd_agrees_on_matmul_chain() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b0 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let mut f = |inp: &[Tensor<f64>]| {
            let a = Node::leaf(inp[0].clone());
            let b = Node::leaf(inp[1].clone());
            Ok(a.matmul(&b)?.reduce_sum(None)?.value().item())
        };
        let fd_grads =
            fd::finite_difference(&mut f, &[a0.clone(), b0.clone()], 1e-5).unwrap();
        let a = Node::leaf(a0);
        let b = Node::leaf(b0);
        a.matmul(&b).unwrap().reduce_sum(None).unwrap().backward().unwrap();
        assert!(fd::max_rel_err(&a.grad().unwrap(), &fd_grads[0], 1e-8) < 1e-9);
        assert!(fd::max_rel_err(&b.grad().unwrap(), &fd_grads[1], 1e-8) < 1e-9);
    }
}
