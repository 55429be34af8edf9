//! Differentiation engine.
//!
//! Two layers cooperate:
//!
//! * [`Tape`] records tensor operations and runs reverse-mode accumulation,
//!   which is what the optimiser needs for the many network weights.
//! * [`SecondOrder`] propagates values, gradients and Hessians forward along
//!   at most four inference-parameter directions. Its slots can be tape
//!   nodes, which makes every Hessian entry (and anything computed from it,
//!   such as a matrix inverse) differentiable by the tape.

mod second_order;
mod tape;
mod tensor;

pub use second_order::{
    condition_number, hessian_block, invert_small_matrix, Field, Inverse, SecondOrder, SmallMatrix, CONDITION_LIMIT,
    MAX_DIRECTIONS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("gradient requested for a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite adjoint encountered at a `{kind}` node")]
    NonFinite { kind: &'static str },
    #[error("{0} second-order directions requested, at most 4 are supported")]
    TooManyDirections(usize),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is singular and cannot be regularised")]
    Singular,
}
