//! Reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, tape_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
