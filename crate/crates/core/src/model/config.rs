use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 128, FFN 512, byte vocabulary.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 257,
            max_seq_len: 128,
        }
    }

    /// Base-size GPT: 12 layers, width 768, 12 heads, FFN 6,144. Vocabulary
    /// and context follow GPT-2 BPE at 512 positions.
    pub fn base() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 6144,
            vocab_size: 50257,
            max_seq_len: 512,
        }
    }

    /// Small enough for thousands of CPU steps in a test.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            vocab_size: 257,
            max_seq_len: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn check_experts(&self, n_experts: usize) -> Result<()> {
        if n_experts == 0 || !self.d_ff.is_multiple_of(n_experts) {
            return Err(Error::InvalidArgument(format!(
                "d_ff {} is not divisible by {} experts",
                self.d_ff, n_experts
            )));
        }
        Ok(())
    }
}
