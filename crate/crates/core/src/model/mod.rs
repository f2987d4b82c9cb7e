//! Decoder-only language model with pre-LN blocks and ReLU FFNs.

mod attention;
mod config;
mod ffn;
mod gpt;

pub use attention::{Attention, AttentionCache};
pub use config::ModelConfig;
pub use ffn::{ffn_backward, ffn_forward, FfnForward, FfnWeights};
pub use gpt::{Block, FeedForward, Gpt, LossOutput, INIT_STD, LN_EPS};
