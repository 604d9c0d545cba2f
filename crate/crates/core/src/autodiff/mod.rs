//! Reverse-mode automatic differentiation over dense `f32` tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, PrimitiveKind, Var};
