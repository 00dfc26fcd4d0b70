//! Two-stage curriculum dialogue modelling on a small reverse-mode autodiff
//! engine: coarse one-to-one generation, latent-variable fine-grained
//! generation with coherence-based selection, knowledge grounding, and a
//! task-oriented conversation engine.

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod task;
pub mod tensor;
pub mod train;

pub use autodiff::{AttentionMask, Graph, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, Parameters, Role};
pub use tensor::Tensor;
