use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use ssdlab_core::analysis::{pattern_similarity, SimilarityMode};
use ssdlab_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ssdlab_core::harness::corpus::validation_windows;
use ssdlab_core::harness::{
    configure_threads, eval_checkpoint_perplexity, export_metrics, moefy, read_jsonl_file, Corpus, CorpusConfig,
    ExportFormat, SparseEval, TrainConfig, TrainMode, Trainer,
};
use ssdlab_core::model::FeedForward;
use ssdlab_core::numerics::RngState;

/// Dense, sparse-MoE and switchable sparse-dense training on a small GPT.
///
/// Worker threads: set SSDLAB_THREADS (results do not depend on it).
#[derive(Parser)]
#[command(name = "ssdlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Split every dense FFN of a checkpoint into experts.
    Moefy(MoefyArgs),
    /// Validation perplexity of a checkpoint, dense or sparse.
    Eval(EvalArgs),
    /// Activation-pattern similarity (per-layer ARI) between two checkpoints.
    Analyze(AnalyzeArgs),
    /// Convert a run's metrics to CSV or JSONL.
    Export(ExportArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Text corpus; documents are separated by blank lines.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional vocabulary file (one extra token per line).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// dense, smoe or ssd.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct MoefyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    experts: usize,
    /// Experts per token; defaults to all of them.
    #[arg(long)]
    k: Option<usize>,
    /// Seed for the clustering.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Experts per token; dense evaluation when absent.
    #[arg(long)]
    k: Option<usize>,
    /// Expert count used to split a dense checkpoint.
    #[arg(long)]
    experts: Option<usize>,
    /// Fraction of (token, expert) pairs dropped batch-wide.
    #[arg(long)]
    dynamic_ratio: Option<f64>,
    /// Number of validation windows.
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    #[arg(long)]
    experts: Option<usize>,
    /// Cluster both checkpoints from random starts instead of warm-starting b from a.
    #[arg(long)]
    independent: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// csv or jsonl.
    #[arg(long)]
    format: ExportFormat,
    /// Output file; defaults to metrics.csv or metrics.export.jsonl in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads()
        .map_err(anyhow::Error::from)
        .and_then(|()| match cli.command {
            Command::Train(a) => train(a),
            Command::Moefy(a) => moefy_cmd(a),
            Command::Eval(a) => eval(a),
            Command::Analyze(a) => analyze(a),
            Command::Export(a) => export(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssdlab: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_corpus(args: &CorpusArgs, val_fraction: f64) -> Result<Corpus> {
    let cfg = CorpusConfig {
        path: args.corpus.clone(),
        vocab_path: args.vocab.clone(),
        val_fraction,
    };
    Corpus::load(&cfg).with_context(|| format!("loading corpus {}", args.corpus.display()))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// The training config stored with a checkpoint, if it has one.
fn stored_config(c: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_str(&c.metadata).ok()
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).with_context(|| format!("reading run directory {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = match name {
            "final.bin" => u64::MAX,
            _ => match name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".bin")) {
                Some(s) => s.parse().unwrap_or(0),
                None => continue,
            },
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    best.map(|(_, p)| p)
        .with_context(|| format!("no checkpoint to resume from in {}", dir.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, corpus) = if a.resume {
        if a.config.is_some() || a.mode.is_some() || a.seed.is_some() || a.steps.is_some() {
            bail!("--resume continues with the stored config; drop --config, --mode, --seed and --steps");
        }
        let path = latest_checkpoint(&a.out)?;
        let ckpt = load(&path)?;
        let cfg = stored_config(&ckpt).context("checkpoint carries no training config")?;
        let corpus = load_corpus(&a.corpus, cfg.val_fraction)?;
        eprintln!("resuming from {} at step {}", path.display(), ckpt.step);
        (Trainer::resume(ckpt, &corpus)?, corpus)
    } else {
        let mut cfg: TrainConfig = match &a.config {
            Some(p) => {
                let raw = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(m) = a.mode {
            cfg.mode = m;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        if a.out.join("metrics.jsonl").exists() {
            bail!(
                "{} already holds a run; pass --resume or pick another --out",
                a.out.display()
            );
        }
        let corpus = load_corpus(&a.corpus, cfg.val_fraction)?;
        (Trainer::new(cfg, &corpus)?, corpus)
    };
    if trainer.is_done() {
        eprintln!("run in {} is already complete", a.out.display());
    }
    let total = trainer.config.steps;
    let chunk = trainer.config.eval_interval;
    let mut last = None;
    while !trainer.is_done() {
        let until = (trainer.step / chunk + 1) * chunk;
        let recs = trainer.run_in_dir(until.min(total), &a.out, &corpus)?;
        if let Some(r) = recs.last() {
            eprintln!(
                "step {:>7}  {:<11} loss {:.4}  ppl {}  lr {:.2e}",
                r.step + 1,
                r.phase.as_str(),
                r.loss,
                r.ppl.map_or("-".into(), |p| format!("{p:.3}")),
                r.lr
            );
            last = Some(r.clone());
        }
    }
    let summary = json!({
        "run_dir": a.out,
        "steps": trainer.step,
        "mode": trainer.config.mode,
        "final_loss": last.as_ref().map(|r| r.loss),
        "final_ppl": last.as_ref().and_then(|r| r.ppl),
        "flops": trainer.flops,
        "transitions": trainer.scheduler.as_ref().map_or(0, |s| s.events.len()),
    });
    println!("{summary}");
    Ok(())
}

fn moefy_cmd(a: MoefyArgs) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let k = a.k.unwrap_or(a.experts);
    let model = moefy(&ckpt.model, a.experts, k, &mut RngState::new(a.seed))?;
    let out = Checkpoint {
        model,
        adam: None,
        scheduler: None,
        ..ckpt
    };
    save_checkpoint(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}",
        json!({ "out": a.out, "experts": a.experts, "top_k": k, "layers": out.model.n_layers() })
    );
    Ok(())
}

fn model_experts(c: &Checkpoint) -> Option<usize> {
    c.model.blocks.iter().find_map(|b| match &b.ffn {
        FeedForward::Sparse(m) => Some(m.n_experts()),
        FeedForward::Dense(_) => None,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let stored = stored_config(&ckpt);
    let val_fraction = stored.as_ref().map_or(0.1, |c| c.val_fraction);
    let corpus = load_corpus(&a.corpus, val_fraction)?;
    let seq_len = a
        .seq_len
        .or(stored.as_ref().map(|c| c.seq_len))
        .unwrap_or(ckpt.model.config.max_seq_len);
    let count = a.sequences.or(stored.as_ref().map(|c| c.eval_sequences)).unwrap_or(64);
    let seqs = validation_windows(&corpus.val, count, seq_len)?;
    if a.dynamic_ratio.is_some() && a.k.is_none() {
        bail!("--dynamic-ratio needs --k");
    }
    let sparse = match a.k {
        None => None,
        Some(k) => {
            let n_experts = model_experts(&ckpt)
                .or(a.experts)
                .or(stored.as_ref().map(|c| c.ssd.n_experts))
                .context("cannot tell how many experts to use; pass --experts")?;
            Some(SparseEval {
                top_k: k,
                n_experts,
                dynamic_ratio: a.dynamic_ratio,
            })
        }
    };
    let ppl = eval_checkpoint_perplexity(&ckpt.model, &seqs, sparse, &mut RngState::new(a.seed))?;
    println!(
        "{}",
        json!({
            "checkpoint": a.checkpoint,
            "step": ckpt.step,
            "ppl": ppl,
            "k": a.k,
            "experts": sparse.map(|s| s.n_experts),
            "dynamic_ratio": a.dynamic_ratio,
            "sequences": seqs.len(),
            "seq_len": seq_len,
        })
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ca = load(&a.checkpoint_a)?;
    let cb = load(&a.checkpoint_b)?;
    let n = a.experts.or(stored_config(&ca).map(|c| c.ssd.n_experts)).unwrap_or(8);
    let mode = if a.independent {
        SimilarityMode::Independent
    } else {
        SimilarityMode::WarmStart
    };
    let report = pattern_similarity(
        (&ca.model, ca.step),
        (&cb.model, cb.step),
        n,
        mode,
        &mut RngState::new(a.seed),
    )?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let metrics = a.run_dir.join("metrics.jsonl");
    let records = read_jsonl_file(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let n_layers = match fs::read_to_string(a.run_dir.join("config.json")) {
        Ok(raw) => serde_json::from_str::<TrainConfig>(&raw)?.model.n_layers,
        Err(_) => records.iter().map(|r| r.sparsity.len()).max().unwrap_or(0),
    };
    let (ext, default_name) = match a.format {
        ExportFormat::Csv => ("csv", "metrics.csv"),
        ExportFormat::Jsonl => ("jsonl", "metrics.export.jsonl"),
    };
    let out = a.out.unwrap_or_else(|| a.run_dir.join(default_name));
    if out == metrics {
        bail!("refusing to overwrite the run's own metrics.jsonl; pass --out");
    }
    export_metrics(&records, n_layers, a.format, &out)?;
    println!("{}", json!({ "out": out, "records": records.len(), "format": ext }));
    Ok(())
}
