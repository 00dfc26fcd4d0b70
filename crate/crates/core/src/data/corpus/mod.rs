//! Seeded synthetic corpora with known ground truth.

pub mod knowledge;
pub mod open_domain;

pub use knowledge::gen_knowledge_corpus;
pub use open_domain::{gen_open_domain_corpus, gen_open_domain_deterministic};
