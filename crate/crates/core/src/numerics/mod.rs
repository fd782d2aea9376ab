//! Dense tensors, a reverse-mode differentiation graph, and a central
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_against, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{sigmoid, Axis, Gradients, Graph, LeafKind, Var};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: operand %{lhs} {lhs_shape:?} is incompatible with operand %{rhs} {rhs_shape:?}")]
    OperandMismatch {
        op: &'static str,
        lhs: usize,
        lhs_shape: Vec<usize>,
        rhs: usize,
        rhs_shape: Vec<usize>,
    },
    #[error("{op}: operand %{node} must be a matrix, got shape {shape:?}")]
    Rank {
        op: &'static str,
        node: usize,
        shape: Vec<usize>,
    },
    #[error("slice {start}..{} out of bounds for %{node} with {cols} columns", start + len)]
    SliceBounds {
        node: usize,
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("index {index} out of range {bound} for %{node}")]
    IndexOutOfRange { node: usize, index: usize, bound: usize },
    #[error("%{node}: expected {expected} indices, got {got}")]
    IndexCount { node: usize, expected: usize, got: usize },
    #[error("%{node}: mask has {got} entries, expected {expected}")]
    MaskLength { node: usize, expected: usize, got: usize },
    #[error("%{node}: softmax mask excludes every entry of a row")]
    EmptyMaskRow { node: usize },
    #[error("{0}: needs at least one operand")]
    EmptyOperands(&'static str),
    #[error("non-finite value produced by {op} at %{node} (overflow)")]
    NonFinite { op: &'static str, node: usize },
    #[error("leaf {0:?} defined twice")]
    DuplicateLeaf(String),
    #[error("leaf {0:?} has no binding")]
    UnboundLeaf(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
