//! Decoder-only transformer with learnable distance-biased causal attention.
//!
//! Layout: token embedding plus a fixed sinusoidal position table, dropout,
//! `n_blocks` pre-norm blocks (attention then GELU feed-forward, each with a
//! residual connection), a final layer norm, and a bias-free LM head.

mod backward;
mod forward;
mod generate;
mod weights;

pub use backward::Gradients;
pub use forward::{attention_block, ForwardCache};
pub use generate::{argmax, Answer, DecodeOptions};
pub use weights::{sinusoidal_table, BlockWeights, ModelWeights, ParamKind};

use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream};

/// Additive attention bias `B[h, i, j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Plain causal attention.
    None,
    /// `B[h, i, j] = −m_h · (i − j)` with one learnable slope per head.
    AlibiLearnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_ctx: usize,
    pub vocab: usize,
    pub dropout_p: f64,
    pub bias_mode: BiasMode,
    pub tie_lm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_ff: 3072,
            n_ctx: 1024,
            vocab: crate::tokenizer::GPT2_VOCAB_SIZE,
            dropout_p: 0.1,
            bias_mode: BiasMode::AlibiLearnable,
            tie_lm_head: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration with `d_ff = 4·d_model` and `d_head = d_model / n_heads`.
    pub fn tiny(
        vocab: usize,
        d_model: usize,
        n_heads: usize,
        n_blocks: usize,
        n_ctx: usize,
    ) -> Self {
        Self {
            n_blocks,
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_ff: 4 * d_model,
            n_ctx,
            vocab,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 259 {
            return Err(Error::config(format!(
                "vocab must be at least 259, got {}",
                self.vocab
            )));
        }
        self.validate_shape()
    }

    /// Every check except the byte-tokenizer vocabulary floor; vocab only
    /// needs to be non-empty.
    pub fn validate_shape(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::config("vocab must be positive"));
        }
        if self.n_heads == 0 || self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model ({}) must equal n_heads ({}) × d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(
                "d_model must be even for sinusoidal positions",
            ));
        }
        if self.n_ctx == 0 {
            return Err(Error::config("n_ctx must be at least 1"));
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::config("n_blocks and d_ff must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars (the position table is a
    /// fixed buffer and is not counted).
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, h) = (self.d_model, self.d_ff, self.vocab, self.n_heads);
        let slopes = match self.bias_mode {
            BiasMode::None => 0,
            BiasMode::AlibiLearnable => h,
        };
        let per_block = 2 * d            // ln_1
            + 4 * (d * d + d)            // q, k, v, o projections
            + slopes
            + 2 * d                      // ln_2
            + d * f + f                  // mlp in
            + f * d + d; // mlp out
        let head = if self.tie_lm_head { 0 } else { d * v };
        v * d + self.n_blocks * per_block + 2 * d + head
    }
}

/// A configured model together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization: N(0, 0.02) projections and embeddings, zero
    /// biases and LM head, unit/zero norms, geometric slopes.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, &mut RngStream::new(seed))?;
        Ok(Self { config, weights })
    }

    /// Like [`Model::init`] but accepts vocabularies smaller than the byte
    /// tokenizer, for synthetic-token experiments such as gradient checks.
    pub fn init_small_vocab(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate_shape()?;
        let weights = ModelWeights::init(&config, &mut RngStream::new(seed))?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    /// Number of trainable scalars actually held.
    pub fn num_parameters(&self) -> usize {
        self.weights
            .named()
            .iter()
            .filter(|(_, kind, _)| kind.is_trainable())
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::precondition("empty token sequence"));
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::ContextLength {
                requested: tokens.len(),
                limit: self.config.n_ctx,
            });
        }
        if let Some((position, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab)
        {
            return Err(Error::DataAt {
                position,
                message: format!("token id {id} outside vocabulary of {}", self.config.vocab),
            });
        }
        Ok(())
    }
}
