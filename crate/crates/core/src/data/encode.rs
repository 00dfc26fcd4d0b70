//! Input assembly: `[slot?][knowledge][context][response]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sample::DialogueSample;
use super::vocab::{Vocab, BOS, CLS_SLOT, EOS, LATENT_SLOT};

/// Segment ids for each part of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentScheme {
    /// The context turn right before the response and every second turn
    /// before it.
    pub context: usize,
    /// The remaining (other speaker's) context turns.
    pub context_alt: usize,
    pub response: usize,
    pub knowledge: usize,
    pub slot: usize,
}

impl Default for SegmentScheme {
    fn default() -> Self {
        Self {
            context: 0,
            response: 1,
            knowledge: 2,
            slot: 3,
            context_alt: 4,
        }
    }
}

impl SegmentScheme {
    pub const COUNT: usize = 5;
}

/// What occupies position 0, if anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    None,
    /// Latent recognition / latent embedding slot.
    Latent,
    /// Classification slot for the coherence head.
    Cls,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub slot: Slot,
    pub knowledge_len: usize,
    pub context_len: usize,
    /// Includes the leading `[BOS]`.
    pub response_len: usize,
    pub latent_id: Option<usize>,
    response_segment: usize,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn slot_len(&self) -> usize {
        usize::from(self.slot != Slot::None)
    }

    pub fn prefix_len(&self) -> usize {
        self.slot_len() + self.knowledge_len + self.context_len
    }

    pub fn response_range(&self) -> Range<usize> {
        self.prefix_len()..self.len()
    }

    pub fn knowledge_range(&self) -> Range<usize> {
        let s = self.slot_len();
        s..s + self.knowledge_len
    }

    pub fn context_range(&self) -> Range<usize> {
        let s = self.slot_len() + self.knowledge_len;
        s..s + self.context_len
    }

    /// Response tokens after `[BOS]`.
    pub fn response_tokens(&self) -> &[usize] {
        &self.token_ids[self.prefix_len() + 1..]
    }

    /// Next-token targets for every response position: the response shifted
    /// left by one, closed with `[EOS]`.
    pub fn lm_targets(&self) -> Vec<usize> {
        let mut t = self.response_tokens().to_vec();
        t.push(EOS);
        t
    }

    /// Appends a token to the response (used while decoding).
    pub fn push_response(&mut self, id: usize) {
        let pos = self.len();
        self.token_ids.push(id);
        self.segment_ids.push(self.response_segment);
        self.position_ids.push(pos);
        self.response_len += 1;
    }

    pub fn with_latent(mut self, z: usize) -> Self {
        self.latent_id = Some(z);
        self
    }
}

/// Builds an input from already-tokenized parts.
///
/// Oldest context turns are dropped first, then oldest knowledge entries,
/// until the sequence fits in `max_len`. The response is never truncated.
pub fn encode_ids(
    knowledge: &[Vec<usize>],
    context: &[Vec<usize>],
    response: &[usize],
    scheme: &SegmentScheme,
    max_len: usize,
    slot: Slot,
) -> Result<EncodedInput> {
    let slot_len = usize::from(slot != Slot::None);
    let response_len = response.len() + 1;
    if slot_len + response_len > max_len {
        return Err(Error::TooLong {
            len: slot_len + response_len,
            max: max_len,
        });
    }
    let item_len = |t: &Vec<usize>| t.len() + 1;
    let budget = max_len - slot_len - response_len;
    let mut ctx_start = 0;
    let mut know_start = 0;
    let mut used: usize =
        knowledge.iter().map(item_len).sum::<usize>() + context.iter().map(item_len).sum::<usize>();
    while used > budget && ctx_start < context.len() {
        used -= item_len(&context[ctx_start]);
        ctx_start += 1;
    }
    while used > budget && know_start < knowledge.len() {
        used -= item_len(&knowledge[know_start]);
        know_start += 1;
    }

    let mut tokens = Vec::with_capacity(slot_len + used + response_len);
    let mut segments = Vec::with_capacity(tokens.capacity());
    match slot {
        Slot::None => {}
        Slot::Latent => {
            tokens.push(LATENT_SLOT);
            segments.push(scheme.slot);
        }
        Slot::Cls => {
            tokens.push(CLS_SLOT);
            segments.push(scheme.slot);
        }
    }
    let mut knowledge_len = 0;
    for k in &knowledge[know_start..] {
        tokens.extend(k);
        tokens.push(EOS);
        knowledge_len += item_len(k);
        segments.resize(tokens.len(), scheme.knowledge);
    }
    let kept = &context[ctx_start..];
    let mut context_len = 0;
    for (i, turn) in kept.iter().enumerate() {
        let from_end = kept.len() - 1 - i;
        let seg = if from_end % 2 == 0 {
            scheme.context
        } else {
            scheme.context_alt
        };
        tokens.extend(turn);
        tokens.push(EOS);
        context_len += item_len(turn);
        segments.resize(tokens.len(), seg);
    }
    tokens.push(BOS);
    tokens.extend(response);
    segments.resize(tokens.len(), scheme.response);
    let position_ids = (0..tokens.len()).collect();
    Ok(EncodedInput {
        token_ids: tokens,
        segment_ids: segments,
        position_ids,
        slot,
        knowledge_len,
        context_len,
        response_len,
        latent_id: None,
        response_segment: scheme.response,
    })
}

/// Tokenizes and encodes a sample.
pub fn encode_sample(
    sample: &DialogueSample,
    vocab: &Vocab,
    scheme: &SegmentScheme,
    max_len: usize,
    slot: Slot,
) -> Result<EncodedInput> {
    sample.validate()?;
    let knowledge: Vec<_> = sample.knowledge.iter().map(|k| vocab.tokenize(k)).collect();
    let context: Vec<_> = sample.context.iter().map(|c| vocab.tokenize(c)).collect();
    encode_ids(
        &knowledge,
        &context,
        &vocab.tokenize(&sample.response),
        scheme,
        max_len,
        slot,
    )
}

/// Encodes a generation prompt: everything up to and including `[BOS]`
/// plus an optional forced response prefix.
pub fn encode_prompt(
    knowledge: &[String],
    context: &[String],
    forced: &[usize],
    vocab: &Vocab,
    scheme: &SegmentScheme,
    max_len: usize,
    slot: Slot,
) -> Result<EncodedInput> {
    let knowledge: Vec<_> = knowledge.iter().map(|k| vocab.tokenize(k)).collect();
    let context: Vec<_> = context.iter().map(|c| vocab.tokenize(c)).collect();
    encode_ids(&knowledge, &context, forced, scheme, max_len, slot)
}

/// Roles swapped: the response is the prefix and the flattened context is
/// the generated part. Used to score `p(c | r)`.
pub fn encode_swapped(
    sample: &DialogueSample,
    vocab: &Vocab,
    scheme: &SegmentScheme,
    max_len: usize,
) -> Result<EncodedInput> {
    let context = vocab.tokenize(&sample.context.join(" "));
    if context.is_empty() {
        return Err(Error::Data("empty context cannot be scored backwards".into()));
    }
    encode_ids(
        &[],
        &[vocab.tokenize(&sample.response)],
        &context,
        scheme,
        max_len,
        Slot::None,
    )
}
