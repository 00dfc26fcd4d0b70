use serde::{Deserialize, Serialize};

use crate::data::encode::SegmentScheme;
use crate::data::vocab::SPECIALS;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    /// Cardinality K of the discrete latent variable.
    pub n_latent: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Default toy configuration.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 128,
            vocab_size,
            n_segments: SegmentScheme::COUNT,
            n_latent: 8,
            dropout: 0.0,
        }
    }

    /// A narrower configuration that trains in about a minute on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            ..Self::toy(vocab_size)
        }
    }

    /// Published full-scale shape: 32 blocks, 32 heads, width 2048 and an
    /// 8k subword vocabulary. Feed-forward width, positions and K are our
    /// own fill-ins. Kept for reference only; never trained here.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 32,
            n_heads: 32,
            d_model: 2048,
            d_ff: 4 * 2048,
            max_positions: 512,
            vocab_size: 8000,
            n_segments: SegmentScheme::COUNT,
            n_latent: 8,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layers and widths must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_latent == 0 {
            return bad("n_latent must be at least 1".into());
        }
        if self.vocab_size < SPECIALS.len() {
            return bad(format!(
                "vocab_size {} smaller than the {} reserved tokens",
                self.vocab_size,
                SPECIALS.len()
            ));
        }
        if self.n_segments < SegmentScheme::COUNT {
            return bad(format!("need {} segments", SegmentScheme::COUNT));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
