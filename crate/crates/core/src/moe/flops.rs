//! Analytic FLOP counts.
//!
//! Conventions: one multiply-add is 2 FLOPs; a training step costs three
//! forward passes (forward + backward through activations and weights);
//! attention scores are counted against the full sequence length; the output
//! projection over the vocabulary is included and embedding lookups are free.
//! Only the FFN term differs between modes.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlopsMode {
    Dense,
    Smoe {
        k: usize,
        n: usize,
    },
    /// Step-weighted mix of dense and `Smoe { k, n }` steps.
    Ssd {
        dense_steps: u64,
        sparse_steps: u64,
        k: usize,
        n: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsEstimate {
    /// Forward FLOPs of all FFN layers for one token.
    pub ffn_forward_per_token: f64,
    pub forward_per_token: f64,
    pub train_per_token: f64,
    pub train_per_step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsModel {
    pub config: ModelConfig,
    pub seq_len: usize,
    pub tokens_per_step: u64,
}

impl FlopsModel {
    pub fn new(config: ModelConfig, seq_len: usize, tokens_per_step: u64) -> Self {
        Self {
            config,
            seq_len,
            tokens_per_step,
        }
    }

    /// Q, K, V, O projections plus score and value mixing, one layer.
    pub fn attention_forward(&self) -> u64 {
        let d = self.config.d_model as u64;
        let t = self.seq_len as u64;
        2 * 4 * d * d + 2 * 2 * t * d
    }

    /// Both FFN projections, one layer.
    pub fn ffn_dense_forward(&self) -> u64 {
        2 * 2 * self.config.d_model as u64 * self.config.d_ff as u64
    }

    /// `k` of `n` experts plus the `n`-way centroid gate, one layer.
    pub fn ffn_sparse_forward(&self, k: usize, n: usize) -> u64 {
        let d = self.config.d_model as u64;
        let expert = (self.config.d_ff / n) as u64;
        2 * 2 * d * expert * k as u64 + self.gating_forward(n)
    }

    pub fn gating_forward(&self, n: usize) -> u64 {
        2 * n as u64 * self.config.d_model as u64
    }

    pub fn head_forward(&self) -> u64 {
        2 * self.config.d_model as u64 * self.config.vocab_size as u64
    }

    fn forward_with_ffn(&self, ffn: u64) -> u64 {
        self.config.n_layers as u64 * (self.attention_forward() + ffn) + self.head_forward()
    }

    pub fn dense_forward_per_token(&self) -> u64 {
        self.forward_with_ffn(self.ffn_dense_forward())
    }

    pub fn sparse_forward_per_token(&self, k: usize, n: usize) -> u64 {
        self.forward_with_ffn(self.ffn_sparse_forward(k, n))
    }

    /// Training FLOPs of one step in the given compute mode; integer so that
    /// accumulated counters compare exactly.
    pub fn dense_step(&self) -> u64 {
        3 * self.dense_forward_per_token() * self.tokens_per_step
    }

    pub fn sparse_step(&self, k: usize, n: usize) -> u64 {
        3 * self.sparse_forward_per_token(k, n) * self.tokens_per_step
    }

    pub fn estimate(&self, mode: FlopsMode) -> FlopsEstimate {
        let l = self.config.n_layers as f64;
        let (ffn, fwd) = match mode {
            FlopsMode::Dense => (
                l * self.ffn_dense_forward() as f64,
                self.dense_forward_per_token() as f64,
            ),
            FlopsMode::Smoe { k, n } => (
                l * self.ffn_sparse_forward(k, n) as f64,
                self.sparse_forward_per_token(k, n) as f64,
            ),
            FlopsMode::Ssd {
                dense_steps,
                sparse_steps,
                k,
                n,
            } => {
                let total = (dense_steps + sparse_steps).max(1) as f64;
                let (wd, ws) = (dense_steps as f64 / total, sparse_steps as f64 / total);
                (
                    l * (wd * self.ffn_dense_forward() as f64 + ws * self.ffn_sparse_forward(k, n) as f64),
                    wd * self.dense_forward_per_token() as f64 + ws * self.sparse_forward_per_token(k, n) as f64,
                )
            }
        };
        FlopsEstimate {
            ffn_forward_per_token: ffn,
            forward_per_token: fwd,
            train_per_token: 3.0 * fwd,
            train_per_step: 3.0 * fwd * self.tokens_per_step as f64,
        }
    }

    /// Total training FLOPs over a schedule of `dense_steps` + `sparse_steps`.
    pub fn schedule_total(&self, dense_steps: u64, sparse_steps: u64, k: usize, n: usize) -> u64 {
        dense_steps * self.dense_step() + sparse_steps * self.sparse_step(k, n)
    }

    /// Dense training cost over SSD training cost for the same number of steps.
    pub fn ssd_speedup(&self, sparse_fraction: f64, k: usize, n: usize) -> f64 {
        let dense = self.dense_forward_per_token() as f64;
        let sparse = self.sparse_forward_per_token(k, n) as f64;
        dense / ((1.0 - sparse_fraction) * dense + sparse_fraction * sparse)
    }
}

/// FFN compute of `k`-of-`n` experts relative to the dense FFN, gating excluded.
pub fn sparse_ffn_fraction(config: &ModelConfig, k: usize, n: usize) -> f64 {
    let m = FlopsModel::new(*config, 1, 1);
    (m.ffn_sparse_forward(k, n) - m.gating_forward(n)) as f64 / m.ffn_dense_forward() as f64
}
