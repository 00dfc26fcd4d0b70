//! Per-latent candidate generation, scoring and selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::encode::{encode_ids, EncodedInput, SegmentScheme, Slot};
use crate::data::vocab::{Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{coherence_probs, response_log_likelihood, Parameters, Role};

use super::search::{beam_search, sample, Hypothesis, PromptModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TopK,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopK,
            top_k: 20,
            beam_size: 5,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument(
                "top_k, beam_size and max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn decode(&self, model: &PromptModel<'_>, rng: &mut ChaCha8Rng) -> Result<Hypothesis> {
        match self.strategy {
            Strategy::Beam => beam_search(model, self.beam_size, self.max_new_tokens),
            Strategy::TopK => {
                let k = self.top_k.min(model.params.config().vocab_size);
                sample(model, k, self.max_new_tokens, rng)
            }
        }
    }
}

/// Tokenized conversation state a response is generated for.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub knowledge: Vec<Vec<usize>>,
    pub context: Vec<Vec<usize>>,
    pub scheme: SegmentScheme,
    pub max_len: usize,
}

impl Prompt {
    pub fn new(vocab: &Vocab, knowledge: &[String], context: &[String], max_len: usize) -> Self {
        Self {
            knowledge: knowledge.iter().map(|k| vocab.tokenize(k)).collect(),
            context: context.iter().map(|c| vocab.tokenize(c)).collect(),
            scheme: SegmentScheme::default(),
            max_len,
        }
    }

    pub fn encode(&self, response: &[usize], slot: Slot) -> Result<EncodedInput> {
        encode_ids(&self.knowledge, &self.context, response, &self.scheme, self.max_len, slot)
    }

    /// Roles swapped: the response as the only context turn, the
    /// flattened context as the generated part.
    pub fn encode_swapped(&self, response: &[usize], slot: Slot) -> Result<EncodedInput> {
        let flat: Vec<usize> = self.context.concat();
        if flat.is_empty() {
            return Err(Error::Data("empty context cannot be scored backwards".into()));
        }
        encode_ids(&[], &[response.to_vec()], &flat, &self.scheme, self.max_len, slot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub z: usize,
    /// Response tokens without the closing `[EOS]`.
    pub tokens: Vec<usize>,
    pub text: String,
    /// Length-averaged log-likelihood under the latent it was drawn with.
    pub log_likelihood: f64,
    pub finished: bool,
    pub coherence: Option<f64>,
    pub forward: Option<f64>,
    pub backward: Option<f64>,
}

/// One candidate per latent value, in latent order. Candidate `z` decodes
/// with its own generator stream `z` of `config.seed`.
pub fn generate_candidates(
    params: &Parameters,
    vocab: &Vocab,
    prompt: &Prompt,
    config: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    config.validate()?;
    if params.role() != Role::Generation {
        return Err(Error::InvalidArgument("candidates need a latent generation model".into()));
    }
    (0..params.config().n_latent)
        .map(|z| {
            let model = PromptModel {
                params,
                prompt: prompt.encode(&[], Slot::Latent)?.with_latent(z),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(z as u64);
            let h = config.decode(&model, &mut rng)?;
            let body = h.body().to_vec();
            Ok(Candidate {
                z,
                text: vocab.detokenize(&body),
                tokens: body,
                log_likelihood: h.score(),
                finished: h.finished,
                coherence: None,
                forward: None,
                backward: None,
            })
        })
        .collect()
}

/// One reply from a latent-free model.
pub fn respond(params: &Parameters, vocab: &Vocab, prompt: &Prompt, config: &DecodeConfig) -> Result<String> {
    config.validate()?;
    if params.role() != Role::Coarse {
        return Err(Error::InvalidArgument("single replies need a latent-free model".into()));
    }
    let model = PromptModel {
        params,
        prompt: prompt.encode(&[], Slot::None)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.decode(&model, &mut rng)?;
    Ok(vocab.detokenize(h.body()))
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// Mean per-token log-likelihood of each target. Latent models are
/// marginalized over a uniform latent prior.
fn mean_log_likelihood(
    params: &Parameters,
    build: impl Fn(Slot) -> Result<Vec<EncodedInput>>,
) -> Result<Vec<f64>> {
    match params.role() {
        Role::Coarse => Ok(response_log_likelihood(params, &build(Slot::None)?)?
            .into_iter()
            .map(|(ll, n)| ll / n as f64)
            .collect()),
        Role::Generation => {
            let base = build(Slot::Latent)?;
            let k = params.config().n_latent;
            let per_z: Vec<Vec<(f64, usize)>> = (0..k)
                .map(|z| {
                    let inputs: Vec<_> = base.iter().map(|i| i.clone().with_latent(z)).collect();
                    response_log_likelihood(params, &inputs)
                })
                .collect::<Result<_>>()?;
            Ok((0..base.len())
                .map(|i| {
                    let lls: Vec<f64> = per_z.iter().map(|r| r[i].0).collect();
                    log_mean_exp(&lls) / per_z[0][i].1 as f64
                })
                .collect())
        }
        Role::Evaluation => Err(Error::InvalidArgument(
            "likelihood scoring needs a generation model".into(),
        )),
    }
}

/// Fills `forward` with the mean per-token `log p(r | c)`.
pub fn score_forward(params: &Parameters, prompt: &Prompt, cands: &mut [Candidate]) -> Result<()> {
    if cands.is_empty() {
        return Ok(());
    }
    let scores = mean_log_likelihood(params, |slot| {
        cands.iter().map(|c| prompt.encode(&c.tokens, slot)).collect()
    })?;
    for (c, s) in cands.iter_mut().zip(scores) {
        c.forward = Some(s);
    }
    Ok(())
}

/// Fills `backward` with the mean per-token `log p(c | r)`, read off the
/// same network with the response as prefix.
pub fn score_backward(params: &Parameters, prompt: &Prompt, cands: &mut [Candidate]) -> Result<()> {
    if cands.is_empty() {
        return Ok(());
    }
    let scores = mean_log_likelihood(params, |slot| {
        cands.iter().map(|c| prompt.encode_swapped(&c.tokens, slot)).collect()
    })?;
    for (c, s) in cands.iter_mut().zip(scores) {
        c.backward = Some(s);
    }
    Ok(())
}

/// Fills `coherence` with the evaluation model's probability that the
/// candidate is a coherent reply.
pub fn score_coherence(params: &Parameters, prompt: &Prompt, cands: &mut [Candidate]) -> Result<()> {
    if cands.is_empty() {
        return Ok(());
    }
    if params.role() != Role::Evaluation {
        return Err(Error::InvalidArgument("coherence scoring needs an evaluation model".into()));
    }
    let inputs = cands
        .iter()
        .map(|c| prompt.encode(&c.tokens, Slot::Cls))
        .collect::<Result<Vec<_>>>()?;
    for (c, p) in cands.iter_mut().zip(coherence_probs(params, &inputs)?) {
        c.coherence = Some(p);
    }
    Ok(())
}

/// Index of the highest value; the earliest wins ties.
pub fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> Option<f64>) -> Result<usize> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, item) in items.iter().enumerate() {
        let v = key(item).ok_or_else(|| Error::InvalidArgument("candidate not scored".into()))?;
        if i == 0 || v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok(best)
}

/// The most coherent candidate; the lowest latent wins ties.
pub fn select(cands: &[Candidate]) -> Result<&Candidate> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by_key(|&i| cands[i].z);
    let sorted: Vec<&Candidate> = order.iter().map(|&i| &cands[i]).collect();
    let i = argmax_by(&sorted, |c| c.coherence)?;
    Ok(sorted[i])
}

/// Convenience: strips a trailing `[EOS]` from decoded tokens.
pub fn trim_eos(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}
