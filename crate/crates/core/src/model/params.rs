use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Which heads a parameter set carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// One-to-one generation: LM head only.
    Coarse,
    /// Fine-grained generation: latent table, posterior and BOW heads.
    Generation,
    /// Coherence estimation: classifier head; MLM reuses the LM head.
    Evaluation,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Coarse => "coarse",
            Role::Generation => "generation",
            Role::Evaluation => "evaluation",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Role::Coarse),
            "generation" => Ok(Role::Generation),
            "evaluation" => Ok(Role::Evaluation),
            _ => Err(Error::InvalidArgument(format!("unknown role `{s}`"))),
        }
    }
}

pub mod names {
    pub const TOKEN: &str = "embed.token";
    pub const SEGMENT: &str = "embed.segment";
    pub const POSITION: &str = "embed.position";
    pub const LATENT: &str = "embed.latent";
    pub const FINAL_GAIN: &str = "final_norm.gain";
    pub const FINAL_BIAS: &str = "final_norm.bias";
    pub const LM_W: &str = "head.lm.weight";
    pub const LM_B: &str = "head.lm.bias";
    pub const POSTERIOR_W: &str = "head.posterior.weight";
    pub const POSTERIOR_B: &str = "head.posterior.bias";
    pub const BOW_W: &str = "head.bow.weight";
    pub const BOW_B: &str = "head.bow.bias";
    pub const COHERENCE_W: &str = "head.coherence.weight";
    pub const COHERENCE_B: &str = "head.coherence.bias";

    pub fn block(layer: usize, part: &str) -> String {
        format!("block.{layer}.{part}")
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

/// Named weight store. Encoder and decoder roles read the same block
/// arrays; there is exactly one block stack per parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    role: Role,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

fn layout(cfg: &ModelConfig, role: Role) -> Vec<(String, Vec<usize>, Init)> {
    use names::*;
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![
        (TOKEN.to_string(), vec![v, d], Init::Normal),
        (SEGMENT.to_string(), vec![cfg.n_segments, d], Init::Normal),
        (POSITION.to_string(), vec![cfg.max_positions, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let mut add = |part: &str, shape: Vec<usize>, init| out.push((block(l, part), shape, init));
        add("attn_norm.gain", vec![d], Init::Ones);
        add("attn_norm.bias", vec![d], Init::Zeros);
        for p in ["q", "k", "v", "o"] {
            add(&format!("attn.{p}.weight"), vec![d, d], Init::Normal);
            add(&format!("attn.{p}.bias"), vec![d], Init::Zeros);
        }
        add("ffn_norm.gain", vec![d], Init::Ones);
        add("ffn_norm.bias", vec![d], Init::Zeros);
        add("ffn.in.weight", vec![d, ff], Init::Normal);
        add("ffn.in.bias", vec![ff], Init::Zeros);
        add("ffn.out.weight", vec![ff, d], Init::Normal);
        add("ffn.out.bias", vec![d], Init::Zeros);
    }
    out.push((FINAL_GAIN.into(), vec![d], Init::Ones));
    out.push((FINAL_BIAS.into(), vec![d], Init::Zeros));
    out.push((LM_W.into(), vec![d, v], Init::Normal));
    out.push((LM_B.into(), vec![v], Init::Zeros));
    match role {
        Role::Coarse => {}
        Role::Generation => {
            out.push((LATENT.into(), vec![cfg.n_latent, d], Init::Normal));
            out.push((POSTERIOR_W.into(), vec![d, cfg.n_latent], Init::Normal));
            out.push((POSTERIOR_B.into(), vec![cfg.n_latent], Init::Zeros));
            out.push((BOW_W.into(), vec![d, v], Init::Normal));
            out.push((BOW_B.into(), vec![v], Init::Zeros));
        }
        Role::Evaluation => {
            out.push((COHERENCE_W.into(), vec![d, 1], Init::Normal));
            out.push((COHERENCE_B.into(), vec![1], Init::Zeros));
        }
    }
    out
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Normal => Tensor::randn(shape, INIT_STD, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
    }
}

impl Parameters {
    /// Fresh weights: N(0, 0.02) matrices, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, role: Role, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = layout(&config, role)
            .into_iter()
            .map(|(name, shape, init)| (name, Arc::new(init_tensor(&shape, init, rng))))
            .collect();
        Ok(Self {
            config,
            role,
            tensors,
        })
    }

    /// Starts a parameter set for `role` from `source`: every tensor the two
    /// layouts share is copied, the rest are freshly initialized. Returns the
    /// names of the fresh tensors.
    pub fn derive<R: Rng + ?Sized>(
        source: &Parameters,
        role: Role,
        rng: &mut R,
    ) -> (Self, Vec<String>) {
        let mut fresh = Vec::new();
        let tensors = layout(&source.config, role)
            .into_iter()
            .map(|(name, shape, init)| match source.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => (name, t.clone()),
                _ => {
                    fresh.push(name.clone());
                    (name, Arc::new(init_tensor(&shape, init, rng)))
                }
            })
            .collect();
        let params = Self {
            config: source.config.clone(),
            role,
            tensors,
        };
        (params, fresh)
    }

    /// Assembles a parameter set from loaded tensors, checking every name
    /// and shape against the layout for `config` and `role`.
    pub fn from_tensors(
        config: ModelConfig,
        role: Role,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape, _) in layout(&config, role) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            out.insert(name, Arc::new(t));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            role,
            tensors: out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}` in {} set", self.role.as_str())))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Sets a tensor to zeros (used to build reference models in tests).
    pub fn zero(&mut self, name: &str) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        t.data_mut().fill(0.0);
        Ok(())
    }
}
