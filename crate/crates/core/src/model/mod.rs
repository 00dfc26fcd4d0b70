pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod params;
pub mod transformer;

pub use config::ModelConfig;
pub use params::{names, Parameters, Role};
pub use transformer::{
    coherence_probs, next_token_accuracy, next_token_log_probs, posterior_probs, response_log_likelihood, Forward,
    MaskKind, Packed,
};
