//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] sweeps the nodes in reverse and
//! leaves the total derivative on every node that requires a gradient.

mod tape;
mod tensor;

pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;
