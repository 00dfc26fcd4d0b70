//! Measurements on the synthetic open-domain and knowledge grammars.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::knowledge;
use crate::data::corpus::open_domain::ContextKind;
use crate::data::encode::{encode_ids, encode_sample, SegmentScheme, Slot};
use crate::data::sample::DialogueSample;
use crate::data::vocab::Vocab;
use crate::decode::candidates::argmax_by;
use crate::decode::{
    generate_candidates, score_coherence, score_forward, Candidate, DecodeConfig, Prompt,
};
use crate::error::{Error, Result};
use crate::model::{coherence_probs, posterior_probs, Parameters};
use crate::train::NegativePool;

/// Mutual information in bits of the empirical joint distribution of
/// `(a, b)` pairs.
pub fn mutual_information_bits(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let na = pairs.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let nb = pairs.iter().map(|p| p.1).max().unwrap_or(0) + 1;
    let mut joint = vec![vec![0f64; nb]; na];
    for &(a, b) in pairs {
        joint[a][b] += 1.0;
    }
    let n = pairs.len() as f64;
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..nb).map(|j| joint.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for (a, row) in joint.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / n;
                mi += p * (p / (pa[a] * pb[b])).log2();
            }
        }
    }
    mi
}

/// MI between the posterior's most likely latent and the sample's cluster.
pub fn posterior_cluster_mi(
    params: &Parameters,
    vocab: &Vocab,
    samples: &[DialogueSample],
    max_len: usize,
) -> Result<f64> {
    let scheme = SegmentScheme::default();
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let inputs = chunk
            .iter()
            .map(|s| encode_sample(s, vocab, &scheme, max_len, Slot::Latent))
            .collect::<Result<Vec<_>>>()?;
        for (s, probs) in chunk.iter().zip(posterior_probs(params, &inputs)?) {
            let cluster = s
                .cluster_id
                .ok_or_else(|| Error::Data("sample without cluster id".into()))?;
            pairs.push((crate::autodiff::argmax(&probs), cluster));
        }
    }
    Ok(mutual_information_bits(&pairs))
}

/// Per-context candidate sets with their validity under the grammar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextCandidates {
    pub context: String,
    pub candidates: Vec<Candidate>,
    /// Admissible cluster of each candidate, `None` if invalid.
    pub clusters: Vec<Option<usize>>,
}

impl ContextCandidates {
    pub fn distinct_clusters(&self) -> usize {
        self.clusters.iter().flatten().collect::<BTreeSet<_>>().len()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.clusters.iter().filter(|c| c.is_some()).count() as f64 / self.clusters.len() as f64
    }
}

/// Generates, scores and checks candidates for each context kind. The
/// evaluation model is optional; without it `coherence` stays unset.
pub fn open_domain_candidates(
    generation: &Parameters,
    evaluation: Option<&Parameters>,
    vocab: &Vocab,
    kinds: &[ContextKind],
    decode: &DecodeConfig,
    max_len: usize,
) -> Result<Vec<ContextCandidates>> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let prompt = Prompt::new(vocab, &[], &[kind.text()], max_len);
            let cfg = DecodeConfig {
                seed: decode.seed.wrapping_add(i as u64),
                ..decode.clone()
            };
            let mut candidates = generate_candidates(generation, vocab, &prompt, &cfg)?;
            score_forward(generation, &prompt, &mut candidates)?;
            if let Some(e) = evaluation {
                score_coherence(e, &prompt, &mut candidates)?;
            }
            let clusters = candidates.iter().map(|c| kind.cluster_of(&c.text)).collect();
            Ok(ContextCandidates {
                context: kind.text(),
                candidates,
                clusters,
            })
        })
        .collect()
}

/// Share of contexts whose candidates cover at least `min_clusters`
/// distinct admissible clusters.
pub fn coverage_rate(sets: &[ContextCandidates], min_clusters: usize) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().filter(|s| s.distinct_clusters() >= min_clusters).count() as f64 / sets.len() as f64
}

/// Valid-response rates of the selection rules over the same candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRates {
    /// Expected rate of a uniformly random candidate.
    pub random: f64,
    pub coherence: f64,
    pub forward: f64,
}

pub fn selection_rates(sets: &[ContextCandidates]) -> Result<SelectionRates> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no contexts".into()));
    }
    let n = sets.len() as f64;
    let mut r = SelectionRates {
        random: 0.0,
        coherence: 0.0,
        forward: 0.0,
    };
    for s in sets {
        r.random += s.valid_fraction();
        let c = argmax_by(&s.candidates, |c| c.coherence)?;
        r.coherence += f64::from(u8::from(s.clusters[c].is_some()));
        let f = argmax_by(&s.candidates, |c| c.forward)?;
        r.forward += f64::from(u8::from(s.clusters[f].is_some()));
    }
    r.random /= n;
    r.coherence /= n;
    r.forward /= n;
    Ok(r)
}

/// Binary accuracy at threshold 0.5 over golden pairs and one corpus
/// negative per golden pair.
pub fn coherence_accuracy(
    params: &Parameters,
    vocab: &Vocab,
    samples: &[DialogueSample],
    pool: &NegativePool,
    seed: u64,
    max_len: usize,
) -> Result<f64> {
    let scheme = SegmentScheme::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let mut inputs = Vec::with_capacity(2 * chunk.len());
        for s in chunk {
            let knowledge: Vec<_> = s.knowledge.iter().map(|k| vocab.tokenize(k)).collect();
            let context: Vec<_> = s.context.iter().map(|c| vocab.tokenize(c)).collect();
            let neg = pool.sample(&s.response, &mut rng);
            for r in [s.response.as_str(), neg] {
                inputs.push(encode_ids(&knowledge, &context, &vocab.tokenize(r), &scheme, max_len, Slot::Cls)?);
            }
        }
        for (i, p) in coherence_probs(params, &inputs)?.into_iter().enumerate() {
            let positive = i % 2 == 0;
            correct += usize::from((p > 0.5) == positive);
        }
    }
    Ok(correct as f64 / (2 * samples.len()) as f64)
}

/// Knowledge-grounding outcome of one held-out sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingCase {
    pub response: String,
    pub correct: bool,
}

/// Decodes each sample with or without its knowledge segment and checks
/// whether the reply states a value of a fact about the asked person and
/// no other value.
pub fn knowledge_grounding(
    params: &Parameters,
    vocab: &Vocab,
    samples: &[DialogueSample],
    with_knowledge: bool,
    decode: &DecodeConfig,
    max_len: usize,
) -> Result<Vec<GroundingCase>> {
    samples
        .iter()
        .map(|s| {
            let k: &[String] = if with_knowledge { &s.knowledge } else { &[] };
            let prompt = Prompt::new(vocab, k, &s.context, max_len);
            let reply = crate::decode::respond(params, vocab, &prompt, decode)?;
            let applicable = knowledge::applicable_values(s);
            let mentioned = knowledge::mentioned_values(&reply);
            let correct = !mentioned.is_empty() && mentioned.iter().all(|v| applicable.contains(v));
            Ok(GroundingCase {
                response: reply,
                correct,
            })
        })
        .collect()
}
