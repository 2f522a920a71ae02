use std::collections::HashMap;
use std::str::FromStr;

use super::ops;
use super::{numel, Tensor, TensorError};

/// Operation kinds recordable on the tape. The set is fixed; attribute-carrying
/// ops read their attribute from [`Attrs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product of two equal-shape tensors.
    Mul,
    /// `x * s` where `s` has shape `[1]`; the only broadcasting in the engine.
    ScalarMul,
    MatMul,
    Transpose,
    Concat,
    Reshape,
    Mean,
    Sum,
    Softmax,
    Sigmoid,
    Relu,
    Log,
    /// `x^p` for `x >= 0` with constant exponent `p`.
    Power,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Power => "power",
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, TensorError> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" | "elementwise-mul" => OpKind::Mul,
            "scalar-mul" => OpKind::ScalarMul,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "concat" => OpKind::Concat,
            "reshape" => OpKind::Reshape,
            "mean" => OpKind::Mean,
            "sum" => OpKind::Sum,
            "softmax" => OpKind::Softmax,
            "sigmoid" => OpKind::Sigmoid,
            "relu" => OpKind::Relu,
            "log" => OpKind::Log,
            "power" => OpKind::Power,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for ops that need them; unused fields are ignored.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    /// Concat/softmax axis (required there); reduction axis for sum/mean
    /// (`None` reduces over all elements).
    pub axis: Option<usize>,
    /// Target shape for reshape.
    pub shape: Option<Vec<usize>>,
    /// Exponent for power.
    pub exponent: Option<f64>,
}

impl Attrs {
    pub fn axis(axis: usize) -> Self {
        Attrs {
            axis: Some(axis),
            ..Attrs::default()
        }
    }

    pub fn shape(shape: Vec<usize>) -> Self {
        Attrs {
            shape: Some(shape),
            ..Attrs::default()
        }
    }

    pub fn exponent(p: f64) -> Self {
        Attrs {
            exponent: Some(p),
            ..Attrs::default()
        }
    }
}

/// Identifier of a tape node. Stale ids (from a cleared tape) are rejected by
/// every operation that consumes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) index: usize,
    pub(crate) epoch: u64,
}

enum Record {
    Leaf { trainable: bool },
    Op {
        kind: OpKind,
        attrs: Attrs,
        inputs: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    record: Record,
}

/// Reverse-mode tape. Single-threaded by construction; distinct tapes are
/// independent. Clearing the tape bumps an epoch counter so that tensors
/// created against the old contents are detected as detached.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    epoch: u64,
}

/// Gradient map produced by [`Tape::backward`], keyed by leaf node.
#[derive(Debug)]
pub struct Gradients {
    epoch: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a trainable leaf tensor, if it is one.
    pub fn wrt(&self, tensor: &Tensor) -> Option<&Tensor> {
        let node = tensor.node_id()?;
        if node.epoch != self.epoch {
            return None;
        }
        self.grads.get(&node.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes. Node ids handed out so far become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.epoch += 1;
    }

    /// Register `value` as a trainable leaf and return the tracked tensor.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        let index = self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            true,
            Record::Leaf { trainable: true },
        );
        Tensor::from_parts(
            value.shape().to_vec(),
            value.data().to_vec(),
            true,
            Some(NodeId {
                index,
                epoch: self.epoch,
            }),
        )
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, record: Record) -> usize {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            record,
        });
        self.nodes.len() - 1
    }

    /// Resolve an input tensor to a node index, pushing a constant node for
    /// untracked inputs.
    fn input_index(&mut self, t: &Tensor) -> Result<usize, TensorError> {
        match t.node_id() {
            Some(id) if id.epoch == self.epoch => Ok(id.index),
            Some(_) | None if t.requires_grad() => Err(TensorError::DetachedTape),
            _ => Ok(self.push(
                t.shape().to_vec(),
                t.data().to_vec(),
                false,
                Record::Leaf { trainable: false },
            )),
        }
    }

    /// Apply `kind` to `inputs`, recording the op when any input is tracked.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor], attrs: Attrs) -> Result<Tensor, TensorError> {
        let (shape, data) = forward(kind, inputs, &attrs)?;
        debug_assert_eq!(data.len(), numel(&shape));
        let track = inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Tensor::new(data, &shape);
        }
        let input_ids = inputs
            .iter()
            .map(|t| self.input_index(t))
            .collect::<Result<Vec<_>, _>>()?;
        let index = self.push(
            shape.clone(),
            data.clone(),
            true,
            Record::Op {
                kind,
                attrs,
                inputs: input_ids,
            },
        );
        Ok(Tensor::from_parts(
            shape,
            data,
            true,
            Some(NodeId {
                index,
                epoch: self.epoch,
            }),
        ))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Add, &[a, b], Attrs::default())
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Sub, &[a, b], Attrs::default())
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Mul, &[a, b], Attrs::default())
    }

    pub fn scalar_mul(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::ScalarMul, &[x, s], Attrs::default())
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::MatMul, &[a, b], Attrs::default())
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Transpose, &[a], Attrs::default())
    }

    pub fn concat(&mut self, inputs: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Concat, inputs, Attrs::axis(axis))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Reshape, &[a], Attrs::shape(shape.to_vec()))
    }

    pub fn mean(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Mean, &[a], Attrs { axis, ..Attrs::default() })
    }

    pub fn sum(&mut self, a: &Tensor, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Sum, &[a], Attrs { axis, ..Attrs::default() })
    }

    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Softmax, &[a], Attrs::axis(axis))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Sigmoid, &[a], Attrs::default())
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Relu, &[a], Attrs::default())
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Log, &[a], Attrs::default())
    }

    pub fn power(&mut self, a: &Tensor, exponent: f64) -> Result<Tensor, TensorError> {
        self.apply(OpKind::Power, &[a], Attrs::exponent(exponent))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// trainable leaf (zeros for leaves the loss does not reach).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = loss.node_id().ok_or(TensorError::DetachedTape)?;
        if node.epoch != self.epoch || node.index >= self.nodes.len() {
            return Err(TensorError::DetachedTape);
        }
        if loss.shape() != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![1.0]);

        for idx in (0..=node.index).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Record::Op { kind, attrs, inputs } = &self.nodes[idx].record {
                self.backward_op(*kind, attrs, inputs, idx, &grad, &mut grads)?;
            } else {
                grads[idx] = Some(grad);
            }
        }

        let mut map = HashMap::new();
        for (idx, n) in self.nodes.iter().enumerate() {
            if let Record::Leaf { trainable: true } = n.record {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; n.data.len()]);
                map.insert(idx, Tensor::from_parts(n.shape.clone(), data, false, None));
            }
        }
        Ok(Gradients {
            epoch: self.epoch,
            grads: map,
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        contribution: impl Fn(&mut [f64]),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
        contribution(slot);
    }

    fn backward_op(
        &self,
        kind: OpKind,
        attrs: &Attrs,
        inputs: &[usize],
        out_idx: usize,
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let node = |i: usize| &self.nodes[i];
        match kind {
            OpKind::Add => {
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, &v) in g.iter_mut().zip(grad) {
                        *gi += v;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for (gi, &v) in g.iter_mut().zip(grad) {
                        *gi += v;
                    }
                });
            }
            OpKind::Sub => {
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, &v) in g.iter_mut().zip(grad) {
                        *gi += v;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for (gi, &v) in g.iter_mut().zip(grad) {
                        *gi -= v;
                    }
                });
            }
            OpKind::Mul => {
                let a = &node(inputs[0]).data;
                let b = &node(inputs[1]).data;
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * b[i];
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * a[i];
                    }
                });
            }
            OpKind::ScalarMul => {
                let x = &node(inputs[0]).data;
                let s = node(inputs[1]).data[0];
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * s;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    let mut acc = 0.0;
                    for i in 0..x.len() {
                        acc += grad[i] * x[i];
                    }
                    g[0] += acc;
                });
            }
            OpKind::MatMul => {
                let a = node(inputs[0]);
                let b = node(inputs[1]);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, inputs[0], |g| {
                    let bt = ops::transpose(&b.data, k, n);
                    let da = ops::matmul(grad, &bt, m, n, k);
                    for i in 0..g.len() {
                        g[i] += da[i];
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    let at = ops::transpose(&a.data, m, k);
                    let db = ops::matmul(&at, grad, k, m, n);
                    for i in 0..g.len() {
                        g[i] += db[i];
                    }
                });
            }
            OpKind::Transpose => {
                let out = &self.nodes[out_idx];
                let (rows, cols) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, inputs[0], |g| {
                    let gt = ops::transpose(grad, rows, cols);
                    for i in 0..g.len() {
                        g[i] += gt[i];
                    }
                });
            }
            OpKind::Concat => {
                let axis = attrs.axis.expect("validated in forward");
                let out_shape = &self.nodes[out_idx].shape;
                let (outer, _, inner) = ops::axis_extents(out_shape, axis);
                let out_axis = out_shape[axis];
                let mut offset = 0;
                for &inp in inputs {
                    let len = node(inp).shape[axis];
                    let base_offset = offset;
                    self.accumulate(grads, inp, |g| {
                        for o in 0..outer {
                            for a in 0..len {
                                let src = (o * out_axis + base_offset + a) * inner;
                                let dst = (o * len + a) * inner;
                                for i in 0..inner {
                                    g[dst + i] += grad[src + i];
                                }
                            }
                        }
                    });
                    offset += len;
                }
            }
            OpKind::Reshape => {
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i];
                    }
                });
            }
            OpKind::Sum | OpKind::Mean => {
                let in_shape = node(inputs[0]).shape.clone();
                match attrs.axis {
                    None => {
                        let scale = if kind == OpKind::Mean {
                            1.0 / numel(&in_shape) as f64
                        } else {
                            1.0
                        };
                        let v = grad[0] * scale;
                        self.accumulate(grads, inputs[0], |g| {
                            for gi in g.iter_mut() {
                                *gi += v;
                            }
                        });
                    }
                    Some(axis) => {
                        let (outer, k, inner) = ops::axis_extents(&in_shape, axis);
                        let scale = if kind == OpKind::Mean { 1.0 / k as f64 } else { 1.0 };
                        self.accumulate(grads, inputs[0], |g| {
                            for o in 0..outer {
                                for a in 0..k {
                                    let dst = (o * k + a) * inner;
                                    let src = o * inner;
                                    for i in 0..inner {
                                        g[dst + i] += grad[src + i] * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            OpKind::Softmax => {
                let axis = attrs.axis.expect("validated in forward");
                let out = &self.nodes[out_idx];
                let (outer, k, inner) = ops::axis_extents(&out.shape, axis);
                let y = &out.data;
                self.accumulate(grads, inputs[0], |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for a in 0..k {
                                let idx = (o * k + a) * inner + i;
                                dot += grad[idx] * y[idx];
                            }
                            for a in 0..k {
                                let idx = (o * k + a) * inner + i;
                                g[idx] += y[idx] * (grad[idx] - dot);
                            }
                        }
                    }
                });
            }
            OpKind::Sigmoid => {
                let y = &self.nodes[out_idx].data;
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            OpKind::Relu => {
                let x = &node(inputs[0]).data;
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += grad[i];
                        }
                    }
                });
            }
            OpKind::Log => {
                let x = &node(inputs[0]).data;
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] / x[i];
                    }
                });
            }
            OpKind::Power => {
                let p = attrs.exponent.expect("validated in forward");
                let x = &node(inputs[0]).data;
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * p * x[i].powf(p - 1.0);
                    }
                });
            }
        }
        Ok(())
    }
}

fn shape_mismatch(kind: OpKind, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op: kind.name().to_string(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn arity(kind: OpKind, inputs: &[&Tensor], expected: usize) -> Result<(), TensorError> {
    if inputs.len() != expected {
        return Err(TensorError::Invalid {
            op: kind.name().to_string(),
            message: format!("expected {expected} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

fn forward(kind: OpKind, inputs: &[&Tensor], attrs: &Attrs) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_mismatch(kind, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match kind {
                    OpKind::Add => x + y,
                    OpKind::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Ok((a.shape().to_vec(), data))
        }
        OpKind::ScalarMul => {
            arity(kind, inputs, 2)?;
            let (x, s) = (inputs[0], inputs[1]);
            if s.shape() != [1] {
                return Err(shape_mismatch(kind, x.shape(), s.shape()));
            }
            let sv = s.data()[0];
            Ok((x.shape().to_vec(), x.data().iter().map(|&v| v * sv).collect()))
        }
        OpKind::MatMul => {
            arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_mismatch(kind, a.shape(), b.shape()));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            Ok((vec![m, n], ops::matmul(a.data(), b.data(), m, k, n)))
        }
        OpKind::Transpose => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            if a.shape().len() != 2 {
                return Err(TensorError::Invalid {
                    op: kind.name().to_string(),
                    message: format!("requires a 2-d tensor, got shape {:?}", a.shape()),
                });
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Ok((vec![c, r], ops::transpose(a.data(), r, c)))
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::Invalid {
                    op: kind.name().to_string(),
                    message: "needs at least one input".to_string(),
                });
            }
            let axis = attrs.axis.ok_or(TensorError::MissingAttr {
                op: kind.name().to_string(),
                attr: "axis",
            })?;
            let rank = inputs[0].shape().len();
            if axis >= rank {
                return Err(TensorError::Invalid {
                    op: kind.name().to_string(),
                    message: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut out_shape = inputs[0].shape().to_vec();
            for t in &inputs[1..] {
                if t.shape().len() != rank {
                    return Err(shape_mismatch(kind, inputs[0].shape(), t.shape()));
                }
                for d in 0..rank {
                    if d != axis && t.shape()[d] != out_shape[d] {
                        return Err(shape_mismatch(kind, inputs[0].shape(), t.shape()));
                    }
                }
            }
            out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
            let (outer, out_axis, inner) = ops::axis_extents(&out_shape, axis);
            let mut data = vec![0.0; numel(&out_shape)];
            let mut offset = 0;
            for t in inputs {
                let len = t.shape()[axis];
                for o in 0..outer {
                    for a in 0..len {
                        let dst = (o * out_axis + offset + a) * inner;
                        let src = (o * len + a) * inner;
                        data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                    }
                }
                offset += len;
            }
            Ok((out_shape, data))
        }
        OpKind::Reshape => {
            arity(kind, inputs, 1)?;
            let shape = attrs.shape.clone().ok_or(TensorError::MissingAttr {
                op: kind.name().to_string(),
                attr: "shape",
            })?;
            if numel(&shape) != inputs[0].numel() {
                return Err(shape_mismatch(kind, inputs[0].shape(), &shape));
            }
            Ok((shape, inputs[0].data().to_vec()))
        }
        OpKind::Sum | OpKind::Mean => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            match attrs.axis {
                None => {
                    let total: f64 = a.data().iter().sum();
                    let v = if kind == OpKind::Mean {
                        total / a.numel() as f64
                    } else {
                        total
                    };
                    Ok((vec![1], vec![v]))
                }
                Some(axis) => {
                    if axis >= a.shape().len() {
                        return Err(TensorError::Invalid {
                            op: kind.name().to_string(),
                            message: format!("axis {axis} out of range for shape {:?}", a.shape()),
                        });
                    }
                    let data = ops::reduce_axis(a.data(), a.shape(), axis, kind == OpKind::Mean);
                    Ok((ops::reduced_shape(a.shape(), axis), data))
                }
            }
        }
        OpKind::Softmax => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            let axis = attrs.axis.ok_or(TensorError::MissingAttr {
                op: kind.name().to_string(),
                attr: "axis",
            })?;
            if axis >= a.shape().len() {
                return Err(TensorError::Invalid {
                    op: kind.name().to_string(),
                    message: format!("axis {axis} out of range for shape {:?}", a.shape()),
                });
            }
            Ok((a.shape().to_vec(), ops::softmax(a.data(), a.shape(), axis)))
        }
        OpKind::Sigmoid => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            Ok((
                a.shape().to_vec(),
                a.data().iter().map(|&x| ops::sigmoid_scalar(x)).collect(),
            ))
        }
        OpKind::Relu => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            Ok((a.shape().to_vec(), a.data().iter().map(|&x| x.max(0.0)).collect()))
        }
        OpKind::Log => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            if a.data().iter().any(|&x| x <= 0.0) {
                return Err(TensorError::Domain {
                    op: kind.name().to_string(),
                    message: "log requires strictly positive inputs".to_string(),
                });
            }
            Ok((a.shape().to_vec(), a.data().iter().map(|&x| x.ln()).collect()))
        }
        OpKind::Power => {
            arity(kind, inputs, 1)?;
            let a = inputs[0];
            let p = attrs.exponent.ok_or(TensorError::MissingAttr {
                op: kind.name().to_string(),
                attr: "exponent",
            })?;
            if a.data().iter().any(|&x| x < 0.0) {
                return Err(TensorError::Domain {
                    op: kind.name().to_string(),
                    message: "power is defined for non-negative inputs only".to_string(),
                });
            }
            Ok((a.shape().to_vec(), a.data().iter().map(|&x| x.powf(p)).collect()))
        }
    }
}
