//! Decoding, per-latent candidates and response selection.

pub mod candidates;
pub mod search;

pub use candidates::{
    generate_candidates, respond, score_backward, score_coherence, score_forward, select, Candidate,
    DecodeConfig, Prompt, Strategy,
};
pub use search::{beam_search, greedy, sample, top_k_sample, Hypothesis, PromptModel, StepModel};
