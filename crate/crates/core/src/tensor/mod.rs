//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a fixed op set over row-major `Vec<f64>`
//! storage, recorded on a [`Tape`] when gradients are requested. There is no
//! broadcasting except [`OpKind::ScalarMul`]; every shape alignment is
//! explicit, which keeps the downstream attention/loss code easy to audit.

mod grad_check;
mod ops;
mod tape;

pub use grad_check::grad_check;
pub use tape::{Attrs, Gradients, NodeId, OpKind, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("{op}: missing attribute `{attr}`")]
    MissingAttr { op: String, attr: &'static str },
    #[error("{op}: {message}")]
    Invalid { op: String, message: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("loss must be a scalar of shape [1], got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor is not attached to this tape (tape cleared or foreign)")]
    DetachedTape,
    #[error("{op}: domain error: {message}")]
    Domain { op: String, message: String },
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense real tensor in row-major order.
///
/// A tensor is either a free value (`node == None`) or attached to a [`Tape`]
/// node. Only tensors produced by [`Tape::leaf`] or by recorded ops carry
/// `requires_grad`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![value], &[1]).expect("scalar is always valid")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            node: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw storage. Mutation detaches the tensor from
    /// any tape it was recorded on.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        self.requires_grad = false;
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a `[1]`-shaped tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<NodeId>,
    ) -> Self {
        Tensor {
            shape,
            data,
            requires_grad,
            node,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![1.0, 2.0], &[3]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 2, .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![f64::NAN], &[1]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite));
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(0.25);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.item(), 0.25);
    }
}
