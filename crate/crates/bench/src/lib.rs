//! Fixtures shared by the benchmarks.

use duet_core::data::corpus::open_domain;
use duet_core::data::{DialogueSample, Vocab};
use duet_core::model::{ModelConfig, Parameters, Role};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Open-domain vocabulary and `n` samples.
pub fn open_domain(n: usize) -> (Vocab, Vec<DialogueSample>) {
    let texts = open_domain::all_texts();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    (vocab, open_domain::gen_open_domain_corpus(0, n))
}

/// Freshly initialized desk-preset parameters.
pub fn desk(vocab: &Vocab, role: Role) -> Parameters {
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.n_latent = 8;
    Parameters::init(cfg, role, &mut rng(0)).expect("valid preset")
}
