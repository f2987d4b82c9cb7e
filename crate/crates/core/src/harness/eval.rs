use rayon::prelude::*;

use crate::clustering::cluster_with_warmstart;
use crate::error::{Error, Result};
use crate::model::{FeedForward, Gpt};
use crate::moe::{split_ffn, Routing};
use crate::numerics::RngState;

/// Sparse evaluation settings: experts per token and, optionally, the
/// dynamic top-k truncation ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseEval {
    pub top_k: usize,
    /// Expert count used when a dense model has to be split first.
    pub n_experts: usize,
    pub dynamic_ratio: Option<f64>,
}

impl SparseEval {
    pub fn routing(&self) -> Routing {
        match self.dynamic_ratio {
            Some(truncation_ratio) if truncation_ratio > 0.0 => Routing::Dynamic { truncation_ratio },
            _ => Routing::TopK,
        }
    }
}

/// Summed NLL and token count; each sequence is scored on its own and the
/// per-sequence sums are added in order, so the result does not depend on
/// the number of threads.
pub fn eval_nll(model: &Gpt, sequences: &[Vec<usize>], routing: Routing) -> Result<(f64, usize)> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let parts = sequences
        .par_iter()
        .map(|s| model.eval_nll(std::slice::from_ref(s), routing))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut count = 0;
    for (s, c) in parts {
        sum += s;
        count += c;
    }
    Ok((sum, count))
}

/// `exp(mean token NLL)`.
pub fn eval_perplexity(model: &Gpt, sequences: &[Vec<usize>], routing: Routing) -> Result<f64> {
    let (sum, count) = eval_nll(model, sequences, routing)?;
    Ok((sum / count as f64).exp())
}

/// Clusters and splits every dense layer (random-start clustering); layers
/// that are already sparse keep their experts and only get the new `top_k`.
pub fn moefy(model: &Gpt, n_experts: usize, top_k: usize, rng: &mut RngState) -> Result<Gpt> {
    model.config.check_experts(n_experts)?;
    let mut out = model.clone();
    for block in &mut out.blocks {
        match &mut block.ffn {
            FeedForward::Dense(w) => {
                let p = cluster_with_warmstart(&w.w_in, n_experts, None, rng)?.partition;
                block.ffn = FeedForward::Sparse(split_ffn(w, &p, top_k)?);
            }
            FeedForward::Sparse(m) => m.set_top_k(top_k)?,
        }
    }
    Ok(out)
}

/// Perplexity of `model`, dense or under `sparse`. A dense model is split
/// first; a model that is already sparse reuses its own expert structure.
pub fn eval_checkpoint_perplexity(
    model: &Gpt,
    sequences: &[Vec<usize>],
    sparse: Option<SparseEval>,
    rng: &mut RngState,
) -> Result<f64> {
    match sparse {
        None => eval_perplexity(model, sequences, Routing::TopK),
        Some(s) => {
            let m = moefy(model, s.n_experts, s.top_k, rng)?;
            eval_perplexity(&m, sequences, s.routing())
        }
    }
}
