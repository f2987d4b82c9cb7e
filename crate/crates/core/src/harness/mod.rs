//! Corpus ingestion, the training loop in its three modes, evaluation and
//! metrics export.

pub mod corpus;
pub mod eval;
pub mod metrics;
pub mod train;

pub use corpus::{synthetic_corpus, Corpus, CorpusConfig, SplitManifest, Tokenizer};
pub use eval::{eval_checkpoint_perplexity, eval_perplexity, moefy, SparseEval};
pub use metrics::{export_metrics, read_jsonl_file, ExportFormat, MetricsRecord};
pub use train::{SmoePreset, TrainConfig, TrainMode, Trainer, TransitionGap};

/// Environment variable holding the number of worker threads.
pub const THREADS_ENV: &str = "SSDLAB_THREADS";

/// Sizes the global worker pool from `SSDLAB_THREADS` when it is set.
/// Results do not depend on the thread count.
pub fn configure_threads() -> crate::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        crate::Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))
    })?;
    // A pool built earlier in the process wins; that is fine for tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
