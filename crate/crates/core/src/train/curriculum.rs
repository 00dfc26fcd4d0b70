//! Stage runner, resumable state and the two-stage schedule.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::encode::{encode_ids, encode_sample, EncodedInput, SegmentScheme, Slot};
use crate::data::mlm::mlm_mask;
use crate::data::sample::DialogueSample;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::checkpoint::{params_from_archive, params_to_archive, Archive, DType};
use crate::model::{Forward, ModelConfig, Parameters, Role};
use crate::tensor::Tensor;

use super::losses::{loss_evaluation, loss_generation, loss_stage1};
use super::negatives::NegativePool;
use super::optim::{Adam, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    Coarse,
    #[serde(rename = "stage2-gen")]
    Generation,
    #[serde(rename = "stage2-eval")]
    Evaluation,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Coarse => "stage1",
            Stage::Generation => "stage2-gen",
            Stage::Evaluation => "stage2-eval",
        }
    }

    pub fn role(self) -> Role {
        match self {
            Stage::Coarse => Role::Coarse,
            Stage::Generation => Role::Generation,
            Stage::Evaluation => Role::Evaluation,
        }
    }

    pub fn slot(self) -> Slot {
        match self {
            Stage::Coarse => Slot::None,
            Stage::Generation => Slot::Latent,
            Stage::Evaluation => Slot::Cls,
        }
    }

    fn index(self) -> u64 {
        match self {
            Stage::Coarse => 0,
            Stage::Generation => 1,
            Stage::Evaluation => 2,
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        [Stage::Coarse, Stage::Generation, Stage::Evaluation]
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    /// Uniform over the corpus's distinct responses.
    CorpusUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub generation_epochs: usize,
    pub evaluation_epochs: usize,
    /// Peak learning rate; `generation_lr` and `evaluation_lr` override it
    /// for the two stage-2 models.
    pub lr: f64,
    pub generation_lr: Option<f64>,
    pub evaluation_lr: Option<f64>,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub mlm_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub negatives: NegativePolicy,
    pub seed: u64,
    pub init_from_stage1: bool,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            stage1_epochs: 10,
            generation_epochs: 10,
            evaluation_epochs: 10,
            lr: 1e-3,
            generation_lr: None,
            evaluation_lr: None,
            warmup_steps: 100,
            clip_norm: 1.0,
            mlm_rate: 0.15,
            tau_start: 1.0,
            tau_end: 0.1,
            negatives: NegativePolicy::CorpusUniform,
            seed: 0,
            init_from_stage1: true,
            max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad("need tau_start >= tau_end > 0");
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return bad("mlm_rate must lie in (0, 1)");
        }
        let lrs = [Some(self.lr), self.generation_lr, self.evaluation_lr];
        if lrs.iter().flatten().any(|lr| !(*lr > 0.0)) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive");
        }
        Ok(())
    }

    pub fn lr_for(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Coarse => self.lr,
            Stage::Generation => self.generation_lr.unwrap_or(self.lr),
            Stage::Evaluation => self.evaluation_lr.unwrap_or(self.lr),
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Coarse => self.stage1_epochs,
            Stage::Generation => self.generation_epochs,
            Stage::Evaluation => self.evaluation_epochs,
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
    pub lr: f64,
}

/// Encoded training data for one stage.
pub struct StageData {
    stage: Stage,
    inputs: Vec<EncodedInput>,
    /// Evaluation only: tokenized knowledge and context of each sample, and
    /// the negative pool.
    prefixes: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)>,
    responses: Vec<String>,
    pool: Option<NegativePool>,
    vocab: Vocab,
    scheme: SegmentScheme,
    max_len: usize,
}

impl StageData {
    pub fn new(
        stage: Stage,
        samples: &[DialogueSample],
        vocab: &Vocab,
        scheme: SegmentScheme,
        max_len: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let inputs = samples
            .iter()
            .map(|s| encode_sample(s, vocab, &scheme, max_len, stage.slot()))
            .collect::<Result<Vec<_>>>()?;
        let (prefixes, responses, pool) = if stage == Stage::Evaluation {
            let prefixes = samples
                .iter()
                .map(|s| {
                    (
                        s.knowledge.iter().map(|k| vocab.tokenize(k)).collect(),
                        s.context.iter().map(|c| vocab.tokenize(c)).collect(),
                    )
                })
                .collect();
            let responses: Vec<String> = samples.iter().map(|s| s.response.clone()).collect();
            let pool = NegativePool::new(responses.iter().map(String::as_str))?;
            (prefixes, responses, Some(pool))
        } else {
            (Vec::new(), Vec::new(), None)
        };
        Ok(Self {
            stage,
            inputs,
            prefixes,
            responses,
            pool,
            vocab: vocab.clone(),
            scheme,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    fn negative<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<EncodedInput> {
        let pool = self.pool.as_ref().expect("evaluation data has a pool");
        let neg = pool.sample(&self.responses[i], rng);
        let (k, c) = &self.prefixes[i];
        encode_ids(k, c, &self.vocab.tokenize(neg), &self.scheme, self.max_len, Slot::Cls)
    }
}

/// Resumable state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub params: Parameters,
    pub adam: Adam,
    pub step: u64,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
}

impl StageCheckpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = params_to_archive(&self.params, DType::F64)?;
        a.set_meta("stage", self.stage.tag());
        a.set_meta("step", self.step.to_string());
        a.set_meta("total_steps", self.total_steps.to_string());
        a.set_meta("adam_t", self.adam.t.to_string());
        a.set_meta("rng_seed", hex::encode(self.rng.get_seed()));
        a.set_meta("rng_stream", self.rng.get_stream().to_string());
        a.set_meta("rng_word_pos", self.rng.get_word_pos().to_string());
        a.set_meta("train_config", serde_json::to_string(&self.config)?);
        for (name, t) in &self.adam.m {
            a.insert(format!("adam_m/{name}"), DType::F64, t.clone());
        }
        for (name, t) in &self.adam.v {
            a.insert(format!("adam_v/{name}"), DType::F64, t.clone());
        }
        Ok(a)
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let num = |a: &Archive, k: &str| -> Result<u128> {
            a.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{k}`")))
        };
        let stage = Stage::from_tag(a.meta("stage")?)?;
        let step = num(&a, "step")? as u64;
        let total_steps = num(&a, "total_steps")? as u64;
        let t = num(&a, "adam_t")? as u64;
        let seed: [u8; 32] = hex::decode(a.meta("rng_seed")?)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("bad `rng_seed`".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num(&a, "rng_stream")? as u64);
        rng.set_word_pos(num(&a, "rng_word_pos")?);
        let config: TrainConfig = serde_json::from_str(a.meta("train_config")?)?;
        let mut take = |prefix: &str| -> BTreeMap<String, Tensor> {
            let keys: Vec<String> = a.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            keys.into_iter()
                .map(|k| {
                    let t = a.tensors.remove(&k).expect("listed key").1;
                    (k[prefix.len()..].to_string(), t)
                })
                .collect()
        };
        let m = take("adam_m/");
        let v = take("adam_v/");
        let params = params_from_archive(&mut a)?;
        let adam = Adam {
            clip_norm: Some(config.clip_norm),
            t,
            m,
            v,
            ..Adam::default()
        };
        Ok(Self {
            stage,
            params,
            adam,
            step,
            total_steps,
            rng,
            config,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_archive()?.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(dir)?)
    }
}

/// Owns the parameters of one stage while it trains.
pub struct Trainer {
    state: StageCheckpoint,
    schedule: LrSchedule,
}

/// Gumbel temperature at `step` of `total`.
pub fn tau_at(config: &TrainConfig, step: u64, total: u64) -> f64 {
    let frac = if total <= 1 {
        0.0
    } else {
        (step as f64 / (total - 1) as f64).min(1.0)
    };
    config.tau_start * (config.tau_end / config.tau_start).powf(frac)
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

impl Trainer {
    pub fn new(stage: Stage, params: Parameters, config: TrainConfig, n_samples: usize) -> Result<Self> {
        config.validate()?;
        if params.role() != stage.role() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters cannot train {}",
                params.role().as_str(),
                stage.tag()
            )));
        }
        let total_steps = config.epochs(stage) as u64 * steps_per_epoch(n_samples, config.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
        rng.set_stream(stage.index());
        let adam = Adam {
            clip_norm: Some(config.clip_norm),
            ..Adam::default()
        };
        Ok(Self::resume(StageCheckpoint {
            stage,
            params,
            adam,
            step: 0,
            total_steps,
            rng,
            config,
        }))
    }

    pub fn resume(state: StageCheckpoint) -> Self {
        let schedule = LrSchedule {
            base: state.config.lr_for(state.stage),
            warmup_steps: state.config.warmup_steps,
            total_steps: state.total_steps,
        };
        Self { state, schedule }
    }

    pub fn state(&self) -> &StageCheckpoint {
        &self.state
    }

    pub fn into_state(self) -> StageCheckpoint {
        self.state
    }

    pub fn params(&self) -> &Parameters {
        &self.state.params
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    /// Gumbel temperature: exponential decay from `tau_start` to `tau_end`
    /// over the stage.
    pub fn tau(&self) -> f64 {
        tau_at(&self.state.config, self.state.step, self.state.total_steps)
    }

    /// Sample indices of the current step. Each epoch is a fresh
    /// permutation derived from (seed, stage, epoch) alone.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let c = &self.state.config;
        let spe = steps_per_epoch(n, c.batch_size);
        let epoch = self.state.step / spe;
        let within = (self.state.step % spe) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream((self.state.stage.index() << 48) | epoch);
        order.shuffle(&mut rng);
        let start = within * c.batch_size;
        order[start..(start + c.batch_size).min(n)].to_vec()
    }

    pub fn step(&mut self, data: &StageData) -> Result<LossRecord> {
        if data.stage() != self.state.stage {
            return Err(Error::InvalidArgument("data prepared for another stage".into()));
        }
        let idx = self.batch_indices(data.len());
        let batch: Vec<EncodedInput> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
        let stage = self.state.stage;
        let tau = self.tau();
        let lr = self.schedule.at(self.state.step);
        let config = self.state.config.clone();
        let vocab_size = self.state.params.config().vocab_size;
        let rng = &mut self.state.rng;
        let dropout_seed: u64 = rng.gen();

        let mut f = Forward::new(&self.state.params, true);
        if self.state.params.config().dropout > 0.0 {
            f = f.with_dropout(ChaCha8Rng::seed_from_u64(dropout_seed));
        }
        let mut parts = BTreeMap::new();
        let loss = match stage {
            Stage::Coarse => {
                let l = loss_stage1(&mut f, &batch)?;
                parts.insert("nll".to_string(), f.graph.value(l).item());
                l
            }
            Stage::Generation => {
                let g = loss_generation(&mut f, &batch, tau, rng)?;
                parts.insert("nll".to_string(), f.graph.value(g.nll).item());
                parts.insert("bow".to_string(), f.graph.value(g.bow).item());
                g.total
            }
            Stage::Evaluation => {
                let mut pos = Vec::with_capacity(batch.len());
                let mut neg = Vec::with_capacity(batch.len());
                for (inp, &i) in batch.iter().zip(&idx) {
                    pos.push(mlm_mask(inp, config.mlm_rate, vocab_size, rng));
                    let n = data.negative(i, rng)?;
                    neg.push(mlm_mask(&n, config.mlm_rate, vocab_size, rng));
                }
                let e = loss_evaluation(&mut f, &pos, &neg)?;
                parts.insert("rce".to_string(), f.graph.value(e.rce).item());
                parts.insert("mlm".to_string(), f.graph.value(e.mlm).item());
                e.total
            }
        };
        let value = f.graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: stage.tag().to_string(),
                step: self.state.step,
                loss: value,
            });
        }
        f.graph.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = f
            .bound_weights()
            .into_iter()
            .filter_map(|(name, v)| f.graph.grad(v).map(|g| (name, g.clone())))
            .collect();
        drop(f);
        self.state.adam.step(&mut self.state.params, &grads, lr)?;
        let record = LossRecord {
            stage,
            step: self.state.step,
            loss: value,
            parts,
            lr,
        };
        self.state.step += 1;
        Ok(record)
    }

    /// Trains to the end of the stage, handing every record to `sink`.
    pub fn run(
        &mut self,
        data: &StageData,
        sink: &mut dyn FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let rec = self.step(data)?;
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Trains one stage from `params` to completion.
pub fn train_stage(
    stage: Stage,
    params: Parameters,
    data: &StageData,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<StageCheckpoint> {
    let mut t = Trainer::new(stage, params, config.clone(), data.len())?;
    t.run(data, sink)?;
    Ok(t.into_state())
}

/// The three trained stages.
#[derive(Clone, Debug)]
pub struct Curriculum {
    pub stage1: StageCheckpoint,
    pub generation: StageCheckpoint,
    pub evaluation: StageCheckpoint,
}

/// Starting point of a stage-2 model: stage-1 weights plus fresh heads, or
/// a fresh model when `init_from_stage1` is off.
pub fn stage2_init(stage1: &Parameters, stage: Stage, config: &TrainConfig) -> Result<Parameters> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x1_0000 + stage.index());
    if config.init_from_stage1 {
        Ok(Parameters::derive(stage1, stage.role(), &mut rng).0)
    } else {
        Parameters::init(stage1.config().clone(), stage.role(), &mut rng)
    }
}

/// Stage 1 first; then the generation and evaluation models, each started
/// from the stage-1 weights.
pub fn run_curriculum(
    samples: &[DialogueSample],
    vocab: &Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<Curriculum> {
    config.validate()?;
    let scheme = SegmentScheme::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Parameters::init(model.clone(), Role::Coarse, &mut rng)?;
    let data = StageData::new(Stage::Coarse, samples, vocab, scheme, config.max_len)?;
    let stage1 = train_stage(Stage::Coarse, init, &data, config, sink)?;

    let data = StageData::new(Stage::Generation, samples, vocab, scheme, config.max_len)?;
    let init = stage2_init(&stage1.params, Stage::Generation, config)?;
    let generation = train_stage(Stage::Generation, init, &data, config, sink)?;

    let data = StageData::new(Stage::Evaluation, samples, vocab, scheme, config.max_len)?;
    let init = stage2_init(&stage1.params, Stage::Evaluation, config)?;
    let evaluation = train_stage(Stage::Evaluation, init, &data, config, sink)?;
    Ok(Curriculum {
        stage1,
        generation,
        evaluation,
    })
}

/// Writes each record as one JSON line.
pub fn jsonl_sink<W: std::io::Write>(out: W) -> impl FnMut(&LossRecord) -> Result<()> {
    let mut out = out;
    move |r| {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
