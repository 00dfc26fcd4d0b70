//! Pre-norm transformer over packed inputs, shared by every head.
//!
//! A batch of [`EncodedInput`]s is packed row-wise into one `[N x d]`
//! matrix; attention never crosses input boundaries. Which positions see
//! which is decided per call by [`MaskKind`], so the same blocks serve as
//! a bidirectional encoder and as a prefix-conditioned decoder.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_softmax, AttentionMask, Graph, Span, Var};
use crate::data::encode::{EncodedInput, Slot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{names, Parameters};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Bidirectional over slot, knowledge and context; causal over the
    /// response.
    Hybrid,
    /// Every position sees every position of its own input.
    Bidirectional,
}

impl MaskKind {
    pub fn build(self, input: &EncodedInput) -> AttentionMask {
        match self {
            MaskKind::Hybrid => AttentionMask::hybrid(input.prefix_len(), input.response_len),
            MaskKind::Bidirectional => AttentionMask::bidirectional(input.len()),
        }
    }
}

/// Final hidden states of a packed batch.
#[derive(Clone, Debug)]
pub struct Packed {
    pub hidden: Var,
    /// Row offset of each input.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    /// Row of position 0 (the slot) of each input.
    pub fn slot_rows(&self) -> Vec<usize> {
        self.offsets.clone()
    }

    /// Rows whose next-token prediction is a response target: `[BOS]`
    /// through the last response token.
    pub fn response_rows(&self, inputs: &[EncodedInput]) -> Vec<usize> {
        inputs
            .iter()
            .zip(&self.offsets)
            .flat_map(|(inp, &o)| inp.response_range().map(move |i| o + i))
            .collect()
    }

    pub fn last_rows(&self) -> Vec<usize> {
        self.offsets.iter().zip(&self.lens).map(|(o, l)| o + l - 1).collect()
    }
}

/// A forward pass under construction: the tape plus lazily bound weights.
pub struct Forward<'p> {
    pub graph: Graph,
    params: &'p Parameters,
    bound: HashMap<&'static str, Var>,
    bound_owned: HashMap<String, Var>,
    trainable: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Forward<'p> {
    /// `trainable` decides whether weights are recorded as parameters
    /// (gradients wanted) or constants.
    pub fn new(params: &'p Parameters, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            bound_owned: HashMap::new(),
            trainable,
            dropout_rng: None,
        }
    }

    /// Enables dropout at the configured rate.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    fn leaf(&mut self, t: Arc<Tensor>) -> Var {
        if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        }
    }

    /// Var for a named weight; one node per name per pass.
    pub fn weight(&mut self, name: &'static str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.leaf(self.params.get(name)?.clone());
        self.bound.insert(name, v);
        Ok(v)
    }

    fn block_weight(&mut self, layer: usize, part: &str) -> Result<Var> {
        let name = names::block(layer, part);
        if let Some(&v) = self.bound_owned.get(&name) {
            return Ok(v);
        }
        let v = self.leaf(self.params.get(&name)?.clone());
        self.bound_owned.insert(name, v);
        Ok(v)
    }

    /// Every weight bound so far, by name.
    pub fn bound_weights(&self) -> Vec<(String, Var)> {
        self.bound
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .chain(self.bound_owned.iter().map(|(k, v)| (k.clone(), *v)))
            .collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.params.config().dropout;
        match self.dropout_rng.as_mut() {
            Some(rng) if rate > 0.0 => self.graph.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, layer: usize, part: &str) -> Result<Var> {
        let w = self.block_weight(layer, &format!("{part}.weight"))?;
        let b = self.block_weight(layer, &format!("{part}.bias"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row_vec(y, b)
    }

    fn head(&mut self, x: Var, w: &'static str, b: &'static str) -> Result<Var> {
        let w = self.weight(w)?;
        let b = self.weight(b)?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row_vec(y, b)
    }

    /// Runs the embedding layer and every block.
    ///
    /// Latent injection at slot rows: with `latent = Some(weights)` the
    /// `[B x K]` weights (one row per input, every input carrying a latent
    /// slot) select from the latent table; with `None`, inputs whose
    /// `latent_id` is set get that row added.
    pub fn encode(
        &mut self,
        inputs: &[EncodedInput],
        mask: MaskKind,
        latent: Option<Var>,
    ) -> Result<Packed> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = self.params.config().clone();
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut lens = Vec::with_capacity(inputs.len());
        let mut spans = Vec::with_capacity(inputs.len());
        let mut masks: HashMap<(usize, usize), Arc<AttentionMask>> = HashMap::new();
        for inp in inputs {
            if inp.len() > cfg.max_positions {
                return Err(Error::TooLong {
                    len: inp.len(),
                    max: cfg.max_positions,
                });
            }
            let offset = tokens.len();
            offsets.push(offset);
            lens.push(inp.len());
            tokens.extend_from_slice(&inp.token_ids);
            segments.extend_from_slice(&inp.segment_ids);
            positions.extend_from_slice(&inp.position_ids);
            let key = (inp.prefix_len(), inp.response_len);
            let m = masks.entry(key).or_insert_with(|| Arc::new(mask.build(inp)));
            spans.push(Span {
                offset,
                len: inp.len(),
                mask: m.clone(),
            });
        }
        let spans: Arc<[Span]> = spans.into();

        let tok = self.weight(names::TOKEN)?;
        let seg = self.weight(names::SEGMENT)?;
        let pos = self.weight(names::POSITION)?;
        let e_tok = self.graph.embedding(tok, &tokens)?;
        let e_seg = self.graph.embedding(seg, &segments)?;
        let e_pos = self.graph.embedding(pos, &positions)?;
        let mut x = self.graph.add(e_tok, e_seg)?;
        x = self.graph.add(x, e_pos)?;
        x = self.inject_latent(x, inputs, &offsets, latent)?;
        x = self.dropout(x)?;

        for l in 0..cfg.n_layers {
            x = self.block(x, l, &spans, cfg.n_heads)?;
        }
        let g = self.weight(names::FINAL_GAIN)?;
        let b = self.weight(names::FINAL_BIAS)?;
        let hidden = self.graph.layer_norm(x, g, b, LN_EPS)?;
        Ok(Packed {
            hidden,
            offsets,
            lens,
        })
    }

    fn inject_latent(
        &mut self,
        x: Var,
        inputs: &[EncodedInput],
        offsets: &[usize],
        latent: Option<Var>,
    ) -> Result<Var> {
        let k = self.params.config().n_latent;
        let (weights, rows) = match latent {
            Some(w) => {
                if inputs.iter().any(|i| i.slot != Slot::Latent) {
                    return Err(Error::InvalidArgument(
                        "latent weights given for an input without a latent slot".into(),
                    ));
                }
                if self.graph.shape(w) != [inputs.len(), k] {
                    return Err(Error::Shape {
                        op: "inject_latent",
                        detail: format!("weights {:?} for {} inputs", self.graph.shape(w), inputs.len()),
                    });
                }
                (w, offsets.to_vec())
            }
            None => {
                let mut one_hot = Vec::new();
                let mut rows = Vec::new();
                for (inp, &o) in inputs.iter().zip(offsets) {
                    let Some(z) = inp.latent_id else { continue };
                    if inp.slot != Slot::Latent || z >= k {
                        return Err(Error::InvalidArgument(format!(
                            "latent {z} needs a latent slot and z < {k}"
                        )));
                    }
                    let mut row = vec![0.0; k];
                    row[z] = 1.0;
                    one_hot.extend(row);
                    rows.push(o);
                }
                if rows.is_empty() {
                    return Ok(x);
                }
                let w = self.graph.constant(Tensor::new(vec![rows.len(), k], one_hot)?);
                (w, rows)
            }
        };
        let table = self.weight(names::LATENT)?;
        let e_z = self.graph.matmul(weights, table)?;
        self.graph.add_rows_at(x, e_z, &rows)
    }

    fn block(&mut self, x: Var, l: usize, spans: &Arc<[Span]>, heads: usize) -> Result<Var> {
        let g = self.block_weight(l, "attn_norm.gain")?;
        let b = self.block_weight(l, "attn_norm.bias")?;
        let h = self.graph.layer_norm(x, g, b, LN_EPS)?;
        let q = self.linear(h, l, "attn.q")?;
        let k = self.linear(h, l, "attn.k")?;
        let v = self.linear(h, l, "attn.v")?;
        let a = self.graph.attention(q, k, v, spans.clone(), heads)?;
        let a = self.linear(a, l, "attn.o")?;
        let a = self.dropout(a)?;
        let x = self.graph.add(x, a)?;

        let g = self.block_weight(l, "ffn_norm.gain")?;
        let b = self.block_weight(l, "ffn_norm.bias")?;
        let h = self.graph.layer_norm(x, g, b, LN_EPS)?;
        let f = self.linear(h, l, "ffn.in")?;
        let f = self.graph.gelu(f)?;
        let f = self.linear(f, l, "ffn.out")?;
        let f = self.dropout(f)?;
        self.graph.add(x, f)
    }

    /// Vocabulary logits at the given rows.
    pub fn lm_logits(&mut self, packed: &Packed, rows: &[usize]) -> Result<Var> {
        let h = self.graph.gather_rows(packed.hidden, rows)?;
        self.head(h, names::LM_W, names::LM_B)
    }

    /// `[B x K]` latent logits from the slot rows.
    pub fn posterior_logits(&mut self, packed: &Packed) -> Result<Var> {
        let h = self.graph.gather_rows(packed.hidden, &packed.slot_rows())?;
        self.head(h, names::POSTERIOR_W, names::POSTERIOR_B)
    }

    /// `[B x V]` bag-of-words logits from the slot rows.
    pub fn bow_logits(&mut self, packed: &Packed) -> Result<Var> {
        let h = self.graph.gather_rows(packed.hidden, &packed.slot_rows())?;
        self.head(h, names::BOW_W, names::BOW_B)
    }

    /// `[B x 1]` coherence logits from the slot rows.
    pub fn coherence_logits(&mut self, packed: &Packed) -> Result<Var> {
        let h = self.graph.gather_rows(packed.hidden, &packed.slot_rows())?;
        self.head(h, names::COHERENCE_W, names::COHERENCE_B)
    }
}

/// Next-token log-probabilities after the last position of each input
/// under the hybrid mask.
pub fn next_token_log_probs(params: &Parameters, inputs: &[EncodedInput]) -> Result<Vec<Vec<f64>>> {
    let mut f = Forward::new(params, false);
    let packed = f.encode(inputs, MaskKind::Hybrid, None)?;
    let logits = f.lm_logits(&packed, &packed.last_rows())?;
    let t = f.graph.value(logits);
    let (_, v) = t.rows_cols();
    Ok(t.data().chunks(v).map(log_softmax).collect())
}

/// Per-input sum of response-token log-likelihoods (including the closing
/// `[EOS]`) and the number of scored tokens.
pub fn response_log_likelihood(
    params: &Parameters,
    inputs: &[EncodedInput],
) -> Result<Vec<(f64, usize)>> {
    let mut f = Forward::new(params, false);
    let packed = f.encode(inputs, MaskKind::Hybrid, None)?;
    let logits = f.lm_logits(&packed, &packed.response_rows(inputs))?;
    let t = f.graph.value(logits);
    let (_, v) = t.rows_cols();
    let mut rows = t.data().chunks(v);
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let mut total = 0.0;
        let targets = inp.lm_targets();
        for &tgt in &targets {
            let row = rows.next().expect("one row per target");
            total += log_softmax(row)[tgt];
        }
        out.push((total, targets.len()));
    }
    Ok(out)
}

/// Teacher-forced next-token accuracy over response positions (including
/// the closing `[EOS]`): (correct, total).
pub fn next_token_accuracy(params: &Parameters, inputs: &[EncodedInput]) -> Result<(usize, usize)> {
    let mut f = Forward::new(params, false);
    let packed = f.encode(inputs, MaskKind::Hybrid, None)?;
    let logits = f.lm_logits(&packed, &packed.response_rows(inputs))?;
    let t = f.graph.value(logits);
    let (_, v) = t.rows_cols();
    let targets: Vec<usize> = inputs.iter().flat_map(EncodedInput::lm_targets).collect();
    let correct = t
        .data()
        .chunks(v)
        .zip(&targets)
        .filter(|(row, &tgt)| crate::autodiff::argmax(row) == tgt)
        .count();
    Ok((correct, targets.len()))
}

/// Posterior over the latent given full context and response.
pub fn posterior_probs(params: &Parameters, inputs: &[EncodedInput]) -> Result<Vec<Vec<f64>>> {
    let mut f = Forward::new(params, false);
    let packed = f.encode(inputs, MaskKind::Bidirectional, None)?;
    let logits = f.posterior_logits(&packed)?;
    let t = f.graph.value(logits);
    let (_, k) = t.rows_cols();
    Ok(t.data()
        .chunks(k)
        .map(|r| log_softmax(r).into_iter().map(f64::exp).collect())
        .collect())
}

/// Coherence probability of each (context, response) input.
pub fn coherence_probs(params: &Parameters, inputs: &[EncodedInput]) -> Result<Vec<f64>> {
    let mut f = Forward::new(params, false);
    let packed = f.encode(inputs, MaskKind::Bidirectional, None)?;
    let logits = f.coherence_logits(&packed)?;
    let s = f.graph.sigmoid(logits)?;
    Ok(f.graph.value(s).data().to_vec())
}
