//! Model configuration and the built-in scale ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale tags recognized by [`ModelConfig::for_scale`].
pub const SCALE_TAGS: [&str; 3] = ["S", "M", "L"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of output symbols. Must be at least 2.
    pub vocab_size: usize,
    /// Prompt length in tokens.
    pub context_len: usize,
    /// Widths of the hidden layers; the first width doubles as the
    /// embedding dimension.
    pub hidden_widths: Vec<usize>,
    /// Label used by the scale-sweep experiment ("S", "M", "L", or custom).
    pub scale_tag: String,
    /// Seed for deterministic parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        context_len: usize,
        hidden_widths: Vec<usize>,
        scale_tag: impl Into<String>,
        init_seed: u64,
    ) -> Result<Self> {
        let config = ModelConfig {
            vocab_size,
            context_len,
            hidden_widths,
            scale_tag: scale_tag.into(),
            init_seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Hidden widths for a built-in scale tag.
    pub fn widths_for_scale(tag: &str) -> Result<Vec<usize>> {
        match tag {
            "S" => Ok(vec![32]),
            "M" => Ok(vec![64, 64]),
            "L" => Ok(vec![128, 128]),
            other => Err(Error::Config(format!(
                "unknown scale tag {other:?} (expected one of {SCALE_TAGS:?})"
            ))),
        }
    }

    /// Config for one of the built-in scale tags.
    pub fn for_scale(
        tag: &str,
        vocab_size: usize,
        context_len: usize,
        init_seed: u64,
    ) -> Result<Self> {
        Self::new(
            vocab_size,
            context_len,
            Self::widths_for_scale(tag)?,
            tag,
            init_seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("hidden_widths must be non-empty".into()));
        }
        if let Some(w) = self.hidden_widths.iter().find(|w| **w == 0) {
            return Err(Error::Config(format!("hidden width {w} must be positive")));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.hidden_widths[0]
    }

    /// (out, in) dimensions of each dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.embed_dim();
        for &w in &self.hidden_widths {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((self.vocab_size, prev));
        dims
    }

    /// Entropy of the uniform distribution over the vocabulary, in nats.
    pub fn max_entropy(&self) -> f64 {
        (self.vocab_size as f64).ln()
    }
}
