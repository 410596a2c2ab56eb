//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records matrix-valued operations as they run; [`Tape::backward`]
//! replays them in reverse from a scalar loss. Learnable tensors live in a
//! [`ParamStore`] and are bound to a fresh tape for every forward pass, so a
//! tape never outlives one evaluation and stores are only mutated between passes.

mod nn;
mod tape;
mod tensor;

pub use nn::{Activation, Bound, Dense, DenseStack, GruCell, GruStack, LstmCell, ParamId, ParamSpec, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty sequence")]
    EmptySequence,
}

/// Runs the backward pass and returns gradients for every parameter of `store`
/// in the store's flat layout.
pub fn eval_with_grad(
    tape: &Tape,
    loss: Var,
    store: &ParamStore,
    bound: &Bound,
) -> Result<Vec<f64>, DiffError> {
    let grads = tape.backward(loss)?;
    Ok(store.gather_grads(bound, &grads))
}

/// Applies a dense stack to `x`.
pub fn dense_apply(
    tape: &mut Tape,
    bound: &Bound,
    stack: &DenseStack,
    x: Var,
) -> Result<Var, DiffError> {
    stack.forward(tape, bound, x)
}
