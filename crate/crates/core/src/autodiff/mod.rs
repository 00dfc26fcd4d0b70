//! Dense reverse-mode automatic differentiation.

mod graph;
pub mod gradcheck;
mod mask;

pub use graph::{argmax, gumbel_noise, log_softmax, Graph, Var};
pub use mask::{AttentionMask, Span};
