#![allow(dead_code)]

use ssdlab_core::clustering::Partition;
use ssdlab_core::harness::{synthetic_corpus, Corpus, Tokenizer, TrainConfig, TrainMode};
use ssdlab_core::model::{FfnWeights, ModelConfig};
use ssdlab_core::numerics::{Matrix, ParamSet, RngState};
use ssdlab_core::scheduler::SsdConfig;

pub fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).unwrap()
}

pub fn random_ffn(d: usize, f: usize, rng: &mut RngState) -> FfnWeights {
    FfnWeights {
        w_in: random_matrix(f, d, 1.0, rng),
        b_in: random_matrix(1, f, 0.5, rng),
        w_out: random_matrix(d, f, 1.0, rng),
        b_out: random_matrix(1, d, 0.5, rng),
    }
}

pub fn random_partition(len: usize, n: usize, rng: &mut RngState) -> Partition {
    Partition::random(len, n, rng).unwrap()
}

pub fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn numeric_grad<P: ParamSet>(params: &P, eps: f64, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = p.tensors()[ti].as_slice()[i];
            p.tensors_mut()[ti].as_mut_slice()[i] = orig + eps;
            let up = f(&p);
            p.tensors_mut()[ti].as_mut_slice()[i] = orig - eps;
            let down = f(&p);
            p.tensors_mut()[ti].as_mut_slice()[i] = orig;
            out.push((up - down) / (2.0 * eps));
        }
    }
    out
}

pub fn flatten<P: ParamSet>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.as_slice().to_vec()).collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        max_seq_len: 6,
    }
}

pub fn toy_corpus() -> Corpus {
    Corpus::from_text(&synthetic_corpus(60_000, 11), Tokenizer::bytes(), 0.1).unwrap()
}

/// A short toy SSD run whose threshold is low enough to switch phases
/// several times.
pub fn toy_ssd_config(steps: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::toy(),
        mode: TrainMode::Ssd,
        seed: 5,
        steps,
        batch_size: 4,
        seq_len: 16,
        lr: 1.0,
        warmup: 50,
        eval_interval: 50,
        eval_sequences: 16,
        checkpoint_interval: 100,
        sparsity_interval: 25,
        ssd: SsdConfig {
            tau: 0.05,
            monitor_interval: 40,
            n_experts: 8,
            top_k: 2,
            ..SsdConfig::default()
        },
        ..TrainConfig::default()
    }
}
