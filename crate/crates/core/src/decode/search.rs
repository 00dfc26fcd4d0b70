use std::cmp::Ordering;

use rand::Rng;

use crate::autodiff::log_softmax;
use crate::data::encode::EncodedInput;
use crate::data::vocab::EOS;
use crate::error::{Error, Result};
use crate::model::{next_token_log_probs, Parameters};

/// Next-token log-probabilities for a batch of partial responses.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A model plus a fixed prompt; prefixes are appended as response tokens.
pub struct PromptModel<'a> {
    pub params: &'a Parameters,
    pub prompt: EncodedInput,
}

impl StepModel for PromptModel<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<EncodedInput> = prefixes
            .iter()
            .map(|p| {
                let mut inp = self.prompt.clone();
                for &t in p {
                    inp.push_response(t);
                }
                inp
            })
            .collect();
        next_token_log_probs(self.params, &inputs)
    }
}

/// Token ids ordered by logit descending, id ascending on ties.
fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Samples from the renormalized mass of the `k` highest logits. At the
/// k-th place, equal logits are admitted lowest id first.
pub fn top_k_sample<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> Result<usize> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k = {k} over {} logits",
            logits.len()
        )));
    }
    let ids = &ranked(logits)[..k];
    let top: Vec<f64> = ids.iter().map(|&i| logits[i]).collect();
    let probs: Vec<f64> = log_softmax(&top).into_iter().map(f64::exp).collect();
    let mut u: f64 = rng.gen();
    for (&id, p) in ids.iter().zip(&probs) {
        if u < *p {
            return Ok(id);
        }
        u -= p;
    }
    Ok(ids[k - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including the closing `[EOS]` when finished.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the closing `[EOS]`.
    pub fn body(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

/// Greedy decoding; lowest id wins ties.
pub fn greedy(model: &dyn StepModel, max_new: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_new {
        let lp = model.log_probs(std::slice::from_ref(&h.tokens))?.remove(0);
        let t = crate::autodiff::argmax(&lp);
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Top-k sampling until `[EOS]` or `max_new` tokens.
pub fn sample<R: Rng + ?Sized>(
    model: &dyn StepModel,
    k: usize,
    max_new: usize,
    rng: &mut R,
) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_new {
        let lp = model.log_probs(std::slice::from_ref(&h.tokens))?.remove(0);
        let t = top_k_sample(&lp, k, rng)?;
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search with length-normalized final ranking.
///
/// Each step keeps the `beam` best expansions by summed log-probability;
/// expansions ending in `[EOS]` leave the beam as finished. Search stops
/// once `beam` hypotheses have finished, no live hypothesis is left, or
/// `max_new` tokens were produced. Returns the finished hypothesis with the
/// best normalized score, or the best live one (`finished == false`) if
/// none finished.
pub fn beam_search(model: &dyn StepModel, beam: usize, max_new: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new {
        if live.is_empty() || done.len() >= beam {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = model.log_probs(&prefixes)?;
        // (log_prob, hypothesis index, token); ties prefer the earlier
        // hypothesis, then the lower token id.
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (hi, lp) in lps.iter().enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                expansions.push((live[hi].log_prob + l, hi, t));
            }
        }
        expansions.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for &(lp, hi, t) in expansions.iter().take(beam) {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(t);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: t == EOS,
            };
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let best = |hs: Vec<Hypothesis>| {
        hs.into_iter().reduce(|a, b| if b.score() > a.score() { b } else { a })
    };
    match best(done) {
        Some(h) => Ok(h),
        None => best(live).ok_or_else(|| Error::InvalidArgument("no hypotheses".into())),
    }
}
