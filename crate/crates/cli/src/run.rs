//! Run directories: corpus, vocabulary, training and checkpoint loading.
//!
//! ```text
//! <run>/run.toml        configuration used for training
//! <run>/corpus.jsonl    training corpus
//! <run>/vocab.txt
//! <run>/loss.jsonl      one record per optimizer step
//! <run>/stage1/ <run>/stage2-gen/ <run>/stage2-eval/   stage archives
//! <run>/reports.jsonl   one record per command
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use duet_core::data::corpus::{knowledge, open_domain};
use duet_core::data::{load_corpus, save_corpus, DialogueSample, SegmentScheme, Vocab};
use duet_core::model::{Parameters, Role};
use duet_core::task::{gen_task_corpus, task_vocab_texts, Database, Engine};
use duet_core::train::{jsonl_sink, stage2_init, train_stage, Stage, StageCheckpoint, StageData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CorpusKind, RunConfig, RUN_CONFIG_FILE};

pub fn generate_corpus(config: &RunConfig) -> anyhow::Result<Vec<DialogueSample>> {
    let (seed, n) = (config.seed, config.corpus.samples);
    Ok(match config.corpus.kind {
        CorpusKind::Open => {
            // Held-out context kinds stay unseen so `metrics` measures transfer.
            let (train_kinds, _) = open_domain::split_kinds();
            let samples = open_domain::gen_open_domain_from(seed, n, &train_kinds, 0.0);
            if config.corpus.noise > 0.0 {
                open_domain::with_response_noise(samples, config.corpus.noise, seed)
            } else {
                samples
            }
        }
        CorpusKind::OpenDeterministic => open_domain::gen_open_domain_deterministic(seed, n),
        CorpusKind::Knowledge => knowledge::gen_knowledge_corpus(seed, n),
        CorpusKind::Task => gen_task_corpus(&Database::fixture(), n, seed)?,
    })
}

pub fn build_vocab(kind: CorpusKind, samples: &[DialogueSample]) -> Vocab {
    let texts = match kind {
        CorpusKind::Open | CorpusKind::OpenDeterministic => open_domain::all_texts(),
        CorpusKind::Knowledge => knowledge::all_texts(),
        CorpusKind::Task => task_vocab_texts(&Database::fixture(), samples),
    };
    Vocab::build(texts.iter().map(String::as_str))
}

/// Which stages `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageSel {
    #[value(name = "1")]
    One,
    Generation,
    Evaluation,
    All,
}

pub fn stage_dir(run: &Path, stage: Stage) -> PathBuf {
    run.join(stage.tag())
}

/// Trains the selected stages into `config.paths.run`. The task corpus
/// trains stage 1 only. Returns the content hash of every archive written.
pub fn train(config: &RunConfig, stages: StageSel, corpus: Option<&Path>) -> anyhow::Result<BTreeMap<String, String>> {
    config.validate()?;
    let run = &config.paths.run;
    std::fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    let samples = match corpus {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(config)?,
    };
    let vocab = build_vocab(config.corpus.kind, &samples);
    save_corpus(&run.join("corpus.jsonl"), &samples)?;
    vocab.save(&run.join("vocab.txt"))?;
    std::fs::write(run.join(RUN_CONFIG_FILE), config.to_toml()?)?;

    let wanted: Vec<Stage> = match (stages, config.corpus.kind) {
        (StageSel::One, _) | (StageSel::All, CorpusKind::Task) => vec![Stage::Coarse],
        (_, CorpusKind::Task) => bail!("the task corpus trains stage 1 only"),
        (StageSel::Generation, _) => vec![Stage::Generation],
        (StageSel::Evaluation, _) => vec![Stage::Evaluation],
        (StageSel::All, _) => vec![Stage::Coarse, Stage::Generation, Stage::Evaluation],
    };
    let mut sink = jsonl_sink(BufWriter::new(File::create(run.join("loss.jsonl"))?));
    let mut hashes = BTreeMap::new();
    let mut stage1: Option<Parameters> = None;
    for stage in wanted {
        let init = match stage {
            Stage::Coarse => {
                let model = config.model.build(vocab.len());
                Parameters::init(model, Role::Coarse, &mut ChaCha8Rng::seed_from_u64(config.train.seed))?
            }
            _ => {
                let s1 = match &stage1 {
                    Some(p) => p.clone(),
                    None => StageCheckpoint::load(&stage_dir(run, Stage::Coarse))
                        .context("stage 1 checkpoint is missing; train stage 1 first")?
                        .params,
                };
                stage2_init(&s1, stage, &config.train)?
            }
        };
        let data = StageData::new(stage, &samples, &vocab, SegmentScheme::default(), config.train.max_len)?;
        let done = train_stage(stage, init, &data, &config.train, &mut sink)?;
        let dir = stage_dir(run, stage);
        let archive = done.to_archive()?;
        archive.save(&dir)?;
        hashes.insert(stage.tag().to_string(), archive.content_hash()?);
        tracing::info!(stage = stage.tag(), steps = done.step, "stage trained");
        if stage == Stage::Coarse {
            stage1 = Some(done.params);
        }
    }
    Ok(hashes)
}

/// How a run answers a chat turn.
#[derive(Clone, Debug)]
pub enum Responder {
    /// Latent candidates ranked by the coherence model.
    Select { generation: Parameters, evaluation: Parameters },
    /// One stage-1 reply.
    Coarse { params: Parameters },
    Task(Engine),
}

/// A trained run, frozen for serving.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub vocab: Vocab,
    pub responder: Responder,
    /// Content hash of each loaded archive, by stage tag.
    pub hashes: BTreeMap<String, String>,
}

fn load_stage(dir: &Path, stage: Stage, hashes: &mut BTreeMap<String, String>) -> anyhow::Result<Option<Parameters>> {
    let path = stage_dir(dir, stage);
    if !path.exists() {
        return Ok(None);
    }
    let archive = duet_core::model::checkpoint::Archive::load(&path)
        .with_context(|| format!("loading {}", path.display()))?;
    hashes.insert(stage.tag().to_string(), archive.content_hash()?);
    Ok(Some(StageCheckpoint::from_archive(archive)?.params))
}

impl LoadedRun {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let config = RunConfig::load(Some(&dir.join(RUN_CONFIG_FILE)))?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut hashes = BTreeMap::new();
        let responder = if config.corpus.kind == CorpusKind::Task {
            let params = load_stage(dir, Stage::Coarse, &mut hashes)?.context("task run has no stage-1 checkpoint")?;
            Responder::Task(Engine::new(params, vocab.clone(), Database::fixture(), config.task.engine)?)
        } else {
            let gen = load_stage(dir, Stage::Generation, &mut hashes)?;
            let eval = load_stage(dir, Stage::Evaluation, &mut hashes)?;
            match (gen, eval) {
                (Some(generation), Some(evaluation)) => Responder::Select { generation, evaluation },
                _ => {
                    hashes.clear();
                    let params = load_stage(dir, Stage::Coarse, &mut hashes)?
                        .with_context(|| format!("{} holds no checkpoint", dir.display()))?;
                    Responder::Coarse { params }
                }
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            vocab,
            responder,
            hashes,
        })
    }

    pub fn mode(&self) -> crate::chat::Mode {
        crate::chat::Mode::of(self.config.corpus.kind)
    }
}
