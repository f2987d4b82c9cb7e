//! Activation sparsity, the Adjusted Rand Index, and checkpoint-to-checkpoint
//! activation-pattern similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_with_warmstart, Partition};
use crate::error::{Error, Result};
use crate::model::{FeedForward, Gpt};
use crate::moe::merge_experts;
use crate::numerics::{Matrix, RngState};

/// Post-ReLU FFN activations of every layer, taken at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSample {
    pub step: u64,
    pub layers: Vec<Matrix>,
}

/// Fraction of exactly-zero entries in one activation matrix.
/// An empty matrix counts as fully sparse.
pub fn matrix_sparsity(hidden: &Matrix) -> f64 {
    if hidden.is_empty() {
        return 1.0;
    }
    let zeros = hidden.as_slice().iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / hidden.len() as f64
}

pub fn activation_sparsity(sample: &ActivationSample) -> Vec<f64> {
    sample.layers.iter().map(matrix_sparsity).collect()
}

fn sum_pairs<'a>(counts: impl Iterator<Item = &'a u64>) -> f64 {
    counts.map(|&c| c * c.saturating_sub(1) / 2).sum::<u64>() as f64
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Hubert–Arabie adjusted Rand index between two labelings of the same items.
///
/// Labels are arbitrary; only co-membership matters. When the expected and
/// maximum index coincide (both labelings trivial in the same way) the
/// labelings are treated as identical and 1 is returned.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "ARI needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("ARI needs at least 2 items, got {n}")));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    // Integer pair counts keep the sums exact and order-independent.
    let index = sum_pairs(table.values());
    let sum_a = sum_pairs(rows.values());
    let sum_b = sum_pairs(cols.values());
    let expected = sum_a * sum_b / choose2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

pub fn partition_ari(a: &Partition, b: &Partition) -> Result<f64> {
    adjusted_rand_index(a.assignment(), b.assignment())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_layer: Vec<f64>,
    pub mean: f64,
    pub step_a: u64,
    pub step_b: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// Cluster `b` warm-started from `a`'s partition, as during training.
    #[default]
    WarmStart,
    /// Cluster both independently from random starts.
    Independent,
}

/// The dense `W_in` of a layer; sparse layers are merged first.
pub fn layer_w_in(model: &Gpt, layer: usize) -> Result<Matrix> {
    match &model.blocks[layer].ffn {
        FeedForward::Dense(w) => Ok(w.w_in.clone()),
        FeedForward::Sparse(m) => Ok(merge_experts(m)?.w_in),
    }
}

/// Clusters the neurons of every layer of both models into `n_experts`
/// groups and reports the per-layer ARI between the two clusterings.
pub fn pattern_similarity(
    a: (&Gpt, u64),
    b: (&Gpt, u64),
    n_experts: usize,
    mode: SimilarityMode,
    rng: &mut RngState,
) -> Result<SimilarityReport> {
    let (model_a, step_a) = a;
    let (model_b, step_b) = b;
    if model_a.config != model_b.config {
        return Err(Error::InvalidArgument("models have different configurations".into()));
    }
    model_a.config.check_experts(n_experts)?;
    let mut per_layer = Vec::with_capacity(model_a.n_layers());
    for layer in 0..model_a.n_layers() {
        // Both sides start from the same stream, so identical weights give
        // identical random-start clusterings.
        let mut rng_b = rng.clone();
        let pa = cluster_with_warmstart(&layer_w_in(model_a, layer)?, n_experts, None, rng)?.partition;
        let prev = match mode {
            SimilarityMode::WarmStart => Some(&pa),
            SimilarityMode::Independent => None,
        };
        let pb = cluster_with_warmstart(&layer_w_in(model_b, layer)?, n_experts, prev, &mut rng_b)?.partition;
        per_layer.push(partition_ari(&pa, &pb)?);
    }
    Ok(SimilarityReport {
        mean: mean(&per_layer),
        per_layer,
        step_a,
        step_b,
    })
}

/// Unweighted mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
