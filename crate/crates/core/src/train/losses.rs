//! Training objectives as nodes on a [`Forward`] tape.

use rand::Rng;

use crate::autodiff::{argmax, gumbel_noise, Var};
use crate::data::encode::{EncodedInput, Slot};
use crate::data::mlm::Masked;
use crate::error::{Error, Result};
use crate::model::{Forward, MaskKind};
use crate::tensor::Tensor;

fn require_slot(inputs: &[EncodedInput], slot: Slot, what: &str) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    if inputs.iter().any(|i| i.slot != slot) {
        return Err(Error::InvalidArgument(format!("{what}: expected {slot:?} slot")));
    }
    if inputs.iter().any(|i| i.response_tokens().is_empty()) {
        return Err(Error::Data(format!("{what}: empty response")));
    }
    Ok(())
}

fn response_targets(inputs: &[EncodedInput]) -> Vec<usize> {
    inputs.iter().flat_map(EncodedInput::lm_targets).collect()
}

/// Mean token-level negative log-likelihood over response positions.
pub fn loss_stage1(f: &mut Forward<'_>, inputs: &[EncodedInput]) -> Result<Var> {
    require_slot(inputs, Slot::None, "stage-1 loss")?;
    let packed = f.encode(inputs, MaskKind::Hybrid, None)?;
    let logits = f.lm_logits(&packed, &packed.response_rows(inputs))?;
    f.graph.cross_entropy(logits, &response_targets(inputs))
}

#[derive(Clone, Debug)]
pub struct GenerationLoss {
    pub total: Var,
    pub nll: Var,
    pub bow: Var,
    /// Latent drawn for each sample.
    pub z: Vec<usize>,
}

/// Latent generation objective. For each sample a latent is drawn from
/// the posterior with hard straight-through Gumbel-softmax; `nll` is the
/// response log-loss given that latent and `bow` the order-free word
/// prediction from the latent slot. Both are per-sample sums averaged over
/// the batch, and `total = nll + bow`.
///
/// `noise` is the Gumbel noise, `[B x K]` row-major.
pub fn loss_generation_with_noise(
    f: &mut Forward<'_>,
    inputs: &[EncodedInput],
    tau: f64,
    noise: &[f64],
) -> Result<GenerationLoss> {
    require_slot(inputs, Slot::Latent, "generation loss")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let b = inputs.len() as f64;
    let recog = f.encode(inputs, MaskKind::Bidirectional, None)?;
    let post = f.posterior_logits(&recog)?;
    let z_w = f.graph.gumbel_softmax_with_noise(post, noise, tau, true)?;
    let (_, k) = f.graph.value(z_w).rows_cols();
    let z = f.graph.value(z_w).data().chunks(k).map(argmax).collect();

    let gen = f.encode(inputs, MaskKind::Hybrid, Some(z_w))?;
    let logits = f.lm_logits(&gen, &gen.response_rows(inputs))?;
    let targets = response_targets(inputs);
    let mean_nll = f.graph.cross_entropy(logits, &targets)?;
    let nll = f.graph.scale(mean_nll, targets.len() as f64 / b)?;

    let bow_logits = f.bow_logits(&gen)?;
    let bow_targets: Vec<Vec<usize>> = inputs.iter().map(|i| i.response_tokens().to_vec()).collect();
    let bow = f.graph.bag_of_words(bow_logits, &bow_targets)?;
    let total = f.graph.add(nll, bow)?;
    Ok(GenerationLoss { total, nll, bow, z })
}

pub fn loss_generation<R: Rng + ?Sized>(
    f: &mut Forward<'_>,
    inputs: &[EncodedInput],
    tau: f64,
    rng: &mut R,
) -> Result<GenerationLoss> {
    let k = f.params().config().n_latent;
    let noise = gumbel_noise(inputs.len() * k, rng);
    loss_generation_with_noise(f, inputs, tau, &noise)
}

#[derive(Clone, Debug)]
pub struct EvaluationLoss {
    pub total: Var,
    pub rce: Var,
    pub mlm: Var,
    /// Coherence logit of each positive, then each negative.
    pub logits: Var,
}

/// Coherence objective over paired positives and negatives (both with a
/// classification slot, both already MLM-masked) plus masked-token
/// prediction on the same pass. `rce` is the summed binary log-loss of a
/// positive and its negative, averaged over pairs; `mlm` the mean
/// log-loss over masked positions (zero when nothing is masked);
/// `total = rce + mlm`.
pub fn loss_evaluation(
    f: &mut Forward<'_>,
    positives: &[Masked],
    negatives: &[Masked],
) -> Result<EvaluationLoss> {
    if positives.len() != negatives.len() {
        return Err(Error::InvalidArgument("one negative per positive".into()));
    }
    let all: Vec<&Masked> = positives.iter().chain(negatives).collect();
    let inputs: Vec<EncodedInput> = all.iter().map(|m| m.input.clone()).collect();
    require_slot(&inputs, Slot::Cls, "evaluation loss")?;
    let n = positives.len();
    let packed = f.encode(&inputs, MaskKind::Bidirectional, None)?;
    let logits = f.coherence_logits(&packed)?;
    let labels: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    let rce = f.graph.bce_logits(logits, &labels, 1.0 / n as f64)?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (m, &o) in all.iter().zip(&packed.offsets) {
        rows.extend(m.positions.iter().map(|p| o + p));
        targets.extend_from_slice(&m.targets);
    }
    let mlm = if rows.is_empty() {
        f.graph.constant(Tensor::scalar(0.0))
    } else {
        let l = f.lm_logits(&packed, &rows)?;
        f.graph.cross_entropy(l, &targets)?
    };
    let total = f.graph.add(rce, mlm)?;
    Ok(EvaluationLoss {
        total,
        rce,
        mlm,
        logits,
    })
}

/// LM-head logits at the masked positions of each input, stacked.
pub fn forward_mlm(f: &mut Forward<'_>, masked: &[Masked]) -> Result<Var> {
    let inputs: Vec<EncodedInput> = masked.iter().map(|m| m.input.clone()).collect();
    let packed = f.encode(&inputs, MaskKind::Bidirectional, None)?;
    let rows: Vec<usize> = masked
        .iter()
        .zip(&packed.offsets)
        .flat_map(|(m, &o)| m.positions.iter().map(move |p| o + p))
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    f.lm_logits(&packed, &rows)
}
