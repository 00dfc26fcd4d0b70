//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use duet_core::decode::DecodeConfig;
use duet_core::model::ModelConfig;
use duet_core::task::EngineConfig;
use duet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// One-to-many open-domain grammar.
    Open,
    /// Cued open-domain samples whose response is fixed by the context.
    OpenDeterministic,
    Knowledge,
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    /// Samples, or dialogues for the task corpus.
    pub samples: usize,
    /// Fraction of open-domain responses swapped for random ones.
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Open,
            samples: 5000,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub n_latent: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            n_latent: 8,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Toy => ModelConfig::toy(vocab_size),
            Preset::Desk => ModelConfig::desk(vocab_size),
        };
        c.n_latent = self.n_latent;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub engine: EngineConfig,
    /// Simulator goals for `simulate` and `metrics`.
    pub goals: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            goals: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Run directory: corpus, vocabulary, checkpoints, logs, reports.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run depends on. `seed` overrides `train.seed` and
/// `decode.seed` so one number pins corpus, initialization and decoding.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub task: TaskSection,
    pub paths: Paths,
}

pub const RUN_CONFIG_FILE: &str = "run.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let mut c: RunConfig = toml::from_str(text)?;
        c.set_seed(c.seed);
        Ok(c)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        if self.corpus.samples == 0 {
            bail!("corpus.samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.corpus.noise) {
            bail!("corpus.noise must lie in [0, 1]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults_and_seed_propagates() {
        let c = RunConfig::from_toml("seed = 7\n[corpus]\nkind = \"task\"\n[train]\nmax_len = 128\n").unwrap();
        assert_eq!(c.corpus.kind, CorpusKind::Task);
        assert_eq!(c.corpus.samples, 5000);
        assert_eq!((c.train.seed, c.decode.seed), (7, 7));
        assert_eq!(c.train.max_len, 128);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.set_seed(3);
        c.corpus.noise = 0.25;
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_fields() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"), "{err:#}");
    }
}
