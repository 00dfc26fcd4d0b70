//! Tokenizer, corpus records, synthetic corpus generators and input
//! assembly.

pub mod corpus;
pub mod encode;
pub mod mlm;
pub mod sample;
pub mod vocab;

pub use corpus::{gen_knowledge_corpus, gen_open_domain_corpus, gen_open_domain_deterministic};
pub use encode::{encode_ids, encode_prompt, encode_sample, encode_swapped, EncodedInput, SegmentScheme, Slot};
pub use mlm::{mlm_mask, Masked};
pub use sample::{load_corpus, save_corpus, DialogueSample};
pub use vocab::Vocab;
