//! Dense tensors and a recorded reverse-mode differentiation graph whose
//! backward pass is itself differentiable.

mod check;
mod graph;
mod ops;
mod tensor;

use thiserror::Error;

pub use check::{
    exact_hessian, grad_check, hessian_vector_product, ExactHessian, HvpProgram,
    ORACLE_PARAM_LIMIT,
};
pub use graph::{Graph, LeafGradient, NodeId};
pub use ops::{MaskKind, Op, PoolGeometry};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward requested before forward supplied the declared inputs")]
    NotForwarded,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{count} parameters exceed the dense oracle limit of {limit}")]
    OracleLimit { count: usize, limit: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

impl AutodiffError {
    /// True for non-finite values and divergence, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite(_))
    }
}

#[cfg(test)]
mod tests;
