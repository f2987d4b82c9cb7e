use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::matrix_sparsity;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::harness::corpus::{sample_batch, validation_windows, Corpus};
use crate::harness::eval::{eval_nll, eval_perplexity};
use crate::harness::metrics::{read_jsonl_file, write_jsonl, MetricsRecord};
use crate::model::{FeedForward, Gpt, ModelConfig};
use crate::moe::{FlopsModel, Routing};
use crate::numerics::{noam_lr, AdamConfig, AdamState, RngState};
use crate::scheduler::{
    monitor_similarity, transition_dense_to_sparse, transition_sparse_to_dense, Action, Phase, SchedulerState,
    SsdConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Dense FFNs throughout.
    #[default]
    Dense,
    /// Split at step 0 by a random balanced partition; fixed top-k throughout.
    Smoe,
    /// Scheduler-driven switching between dense and sparse.
    Ssd,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "smoe" => Ok(Self::Smoe),
            "ssd" => Ok(Self::Ssd),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected dense, smoe or ssd)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoePreset {
    pub n_experts: usize,
    pub top_k: usize,
}

impl Default for SmoePreset {
    fn default() -> Self {
        Self { n_experts: 3, top_k: 2 }
    }
}

/// Everything that determines a run. Serialized as JSON into `config.json`
/// and into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Total optimizer steps.
    pub steps: u64,
    pub batch_size: usize,
    /// Predicted tokens per sequence; windows hold `seq_len + 1` tokens.
    pub seq_len: usize,
    /// Noam base factor.
    pub lr: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
    /// Validation perplexity cadence (steps).
    pub eval_interval: u64,
    /// Size of the fixed validation set.
    pub eval_sequences: usize,
    pub checkpoint_interval: u64,
    /// Activation sparsity is sampled from the training batch every this many steps.
    pub sparsity_interval: u64,
    pub val_fraction: f64,
    /// Scheduler settings for `ssd` mode; `total_steps` is taken from `steps`.
    pub ssd: SsdConfig,
    /// Expert layout for `smoe` mode.
    pub smoe: SmoePreset,
    /// Evaluate validation loss around every phase transition.
    pub log_transitions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            mode: TrainMode::Dense,
            seed: 0,
            steps: 20_000,
            batch_size: 16,
            seq_len: 128,
            lr: 0.5,
            warmup: 2000,
            adam: AdamConfig::default(),
            eval_interval: 500,
            eval_sequences: 64,
            checkpoint_interval: 4000,
            sparsity_interval: 100,
            val_fraction: 0.1,
            ssd: SsdConfig::default(),
            smoe: SmoePreset::default(),
            log_transitions: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seq_len == 0 || self.seq_len > self.model.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.seq_len,
                max: self.model.max_seq_len,
            });
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("batch_size and steps must be positive".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 || self.sparsity_interval == 0 {
            return Err(Error::InvalidArgument("intervals must be positive".into()));
        }
        match self.mode {
            TrainMode::Dense => {}
            TrainMode::Smoe => {
                self.model.check_experts(self.smoe.n_experts)?;
                if self.smoe.top_k == 0 || self.smoe.top_k > self.smoe.n_experts {
                    return Err(Error::InvalidArgument(format!(
                        "smoe top_k {} out of range for {} experts",
                        self.smoe.top_k, self.smoe.n_experts
                    )));
                }
            }
            TrainMode::Ssd => {
                self.ssd_config().validate()?;
                self.model.check_experts(self.ssd.n_experts)?;
            }
        }
        Ok(())
    }

    pub fn ssd_config(&self) -> SsdConfig {
        SsdConfig {
            total_steps: self.steps,
            ..self.ssd.clone()
        }
    }

    pub fn flops_model(&self) -> FlopsModel {
        FlopsModel::new(self.model, self.seq_len, (self.batch_size * self.seq_len) as u64)
    }

    /// The batch of step `step` depends only on the seed and the step.
    pub fn batch_rng(&self, step: u64) -> RngState {
        RngState::stream(self.seed, step + 1)
    }
}

/// Validation loss (mean token NLL) around one phase transition. The sparse
/// model is scored both with every expert active and with the configured
/// top-k; the first must equal the dense loss exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionGap {
    /// First step run in the new phase.
    pub step: u64,
    pub from: Phase,
    pub to: Phase,
    pub dense_loss: f64,
    pub all_experts_loss: f64,
    pub top_k_loss: f64,
}

/// A training run in progress. Model, optimizer, scheduler and run RNG are
/// owned exclusively by the trainer.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Gpt,
    pub adam: AdamState<Gpt>,
    /// Present in `ssd` mode.
    pub scheduler: Option<SchedulerState>,
    rng: RngState,
    /// Completed steps.
    pub step: u64,
    /// Cumulative training FLOPs.
    pub flops: u64,
    flops_model: FlopsModel,
    train_tokens: Vec<usize>,
    val_set: Vec<Vec<usize>>,
    reported_events: usize,
    /// Losses around the transitions of this session (not checkpointed).
    pub transition_gaps: Vec<TransitionGap>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let model = Gpt::new(config.model, &mut rng)?;
        let adam = AdamState::new(&model, config.adam);
        let mut t = Self::assemble(config, corpus, model, adam, None, rng, 0, 0)?;
        match t.config.mode {
            TrainMode::Dense => {}
            TrainMode::Smoe => {
                let SmoePreset { n_experts, top_k } = t.config.smoe;
                let parts = (0..t.model.n_layers())
                    .map(|_| Partition::random(t.config.model.d_ff, n_experts, &mut t.rng))
                    .collect::<Result<Vec<_>>>()?;
                transition_dense_to_sparse(&mut t.model, &mut t.adam, &parts, top_k, false)?;
            }
            TrainMode::Ssd => t.scheduler = Some(SchedulerState::new(t.config.model.n_layers)),
        }
        Ok(t)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, corpus: &Corpus) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&ckpt.metadata)?;
        config.validate()?;
        if config.model != ckpt.model.config {
            return Err(Error::InvalidArgument(
                "checkpoint model does not match its stored config".into(),
            ));
        }
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no optimizer state".into()))?;
        if config.mode == TrainMode::Ssd && ckpt.scheduler.is_none() {
            return Err(Error::InvalidArgument("ssd checkpoint has no scheduler state".into()));
        }
        let rng = RngState::restore(ckpt.rng);
        Self::assemble(
            config,
            corpus,
            ckpt.model,
            adam,
            ckpt.scheduler,
            rng,
            ckpt.step,
            ckpt.flops,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        corpus: &Corpus,
        model: Gpt,
        adam: AdamState<Gpt>,
        scheduler: Option<SchedulerState>,
        rng: RngState,
        step: u64,
        flops: u64,
    ) -> Result<Self> {
        if corpus.tokenizer.vocab_size() > config.model.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "tokenizer has {} ids but the model vocabulary is {}",
                corpus.tokenizer.vocab_size(),
                config.model.vocab_size
            )));
        }
        let val_set = validation_windows(&corpus.val, config.eval_sequences, config.seq_len)?;
        if corpus.train.len() <= config.seq_len {
            return Err(Error::Corpus(format!(
                "training stream has {} tokens, need more than {}",
                corpus.train.len(),
                config.seq_len
            )));
        }
        let reported_events = scheduler
            .as_ref()
            .map_or(0, |s| s.events.iter().filter(|e| e.step < step).count());
        Ok(Self {
            flops_model: config.flops_model(),
            config,
            model,
            adam,
            scheduler,
            rng,
            step,
            flops,
            train_tokens: corpus.train.clone(),
            val_set,
            reported_events,
            transition_gaps: Vec::new(),
        })
    }

    pub fn validation_set(&self) -> &[Vec<usize>] {
        &self.val_set
    }

    pub fn phase(&self) -> Phase {
        match (&self.scheduler, self.config.mode) {
            (Some(s), _) => s.phase,
            (None, TrainMode::Smoe) => Phase::Sparse,
            (None, _) => Phase::Dense,
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Runs one optimizer step and returns its metrics.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        if self.is_done() {
            return Err(Error::InvalidArgument(format!(
                "run already finished at step {}",
                self.step
            )));
        }
        let step = self.step;
        let ssd = self.config.ssd_config();
        if let Some(s) = &mut self.scheduler {
            if s.advance(&ssd, step) == Action::Merge {
                let sparse = self.config.log_transitions.then(|| self.model.clone());
                transition_sparse_to_dense(&mut self.model, &mut self.adam, ssd.reset_adam)?;
                if let Some(sparse) = sparse {
                    let to = self.phase();
                    let dense = self.model.clone();
                    self.log_gap(step, Phase::Sparse, to, &dense, &sparse)?;
                }
            }
        }
        let transition = self.scheduler.as_ref().and_then(|s| {
            let e = s.events.get(self.reported_events).filter(|e| e.step == step).cloned();
            if e.is_some() {
                self.reported_events += 1;
            }
            e
        });
        let phase = self.phase();

        let batch = sample_batch(
            &self.train_tokens,
            self.config.batch_size,
            self.config.seq_len,
            &mut self.config.batch_rng(step),
        )?;
        let sparsity = if step.is_multiple_of(self.config.sparsity_interval) {
            self.model.activations(&batch)?.iter().map(matrix_sparsity).collect()
        } else {
            Vec::new()
        };
        let out = self.model.lm_loss(&batch, Routing::TopK)?;
        let lr = noam_lr(step + 1, self.config.warmup, self.config.model.d_model, self.config.lr);
        let mask = self.model.is_sparse().then_some(out.update_mask.as_slice());
        self.adam.step_masked(&mut self.model, &out.grads, lr, mask)?;
        self.flops += self.step_flops(phase);
        self.step += 1;

        let mut similarity = None;
        if let Some(s) = &mut self.scheduler {
            s.record_step();
            if s.should_monitor(&ssd) {
                similarity = monitor_similarity(&self.model, s, ssd.n_experts, &mut self.rng)?;
                if s.on_monitor(&ssd, similarity, step, &mut self.rng)? {
                    let parts = s
                        .prev_partitions
                        .iter()
                        .map(|p| p.clone().expect("set by monitor"))
                        .collect::<Vec<_>>();
                    let dense = self.config.log_transitions.then(|| self.model.clone());
                    transition_dense_to_sparse(&mut self.model, &mut self.adam, &parts, ssd.top_k, ssd.reset_adam)?;
                    if let Some(dense) = dense {
                        let sparse = self.model.clone();
                        self.log_gap(step + 1, Phase::Dense, Phase::Sparse, &dense, &sparse)?;
                    }
                }
            }
        }

        let ppl = if self.step.is_multiple_of(self.config.eval_interval) || self.is_done() {
            Some(eval_perplexity(&self.model, &self.val_set, Routing::TopK)?)
        } else {
            None
        };
        Ok(MetricsRecord {
            step,
            phase,
            loss: out.loss,
            ppl,
            sparsity,
            similarity,
            flops: self.flops,
            lr,
            transition,
        })
    }

    fn mean_val_loss(&self, model: &Gpt) -> Result<f64> {
        let (sum, count) = eval_nll(model, &self.val_set, Routing::TopK)?;
        Ok(sum / count as f64)
    }

    fn log_gap(&mut self, step: u64, from: Phase, to: Phase, dense: &Gpt, sparse: &Gpt) -> Result<()> {
        let mut all = sparse.clone();
        for b in &mut all.blocks {
            if let FeedForward::Sparse(m) = &mut b.ffn {
                let n = m.n_experts();
                m.set_top_k(n)?;
            }
        }
        let gap = TransitionGap {
            step,
            from,
            to,
            dense_loss: self.mean_val_loss(dense)?,
            all_experts_loss: self.mean_val_loss(&all)?,
            top_k_loss: self.mean_val_loss(sparse)?,
        };
        self.transition_gaps.push(gap);
        Ok(())
    }

    /// FLOPs of one step in `phase` under the run's mode.
    pub fn step_flops(&self, phase: Phase) -> u64 {
        match (self.config.mode, phase) {
            (TrainMode::Smoe, _) => self
                .flops_model
                .sparse_step(self.config.smoe.top_k, self.config.smoe.n_experts),
            (_, Phase::Sparse) => self
                .flops_model
                .sparse_step(self.config.ssd.top_k, self.config.ssd.n_experts),
            _ => self.flops_model.dense_step(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            seed: self.config.seed,
            rng: self.rng.snapshot(),
            flops: self.flops,
            adam: Some(self.adam.clone()),
            scheduler: self.scheduler.clone(),
            metadata: serde_json::to_string(&self.config)?,
        })
    }

    /// Trains until `until` steps are complete (capped at the configured
    /// total) and returns the new records.
    pub fn run_to(&mut self, until: u64) -> Result<Vec<MetricsRecord>> {
        let until = until.min(self.config.steps);
        let mut out = Vec::new();
        while self.step < until {
            out.push(self.train_step()?);
        }
        Ok(out)
    }

    /// Trains to `until` while maintaining a run directory: `config.json`,
    /// `manifest.json`, appended `metrics.jsonl` and `transitions.jsonl`,
    /// `ckpt_XXXXXXXX.bin` every
    /// checkpoint interval and `final.bin` at the end. Records past the
    /// current step (left by an interrupted run) are dropped first.
    pub fn run_in_dir(&mut self, until: u64, dir: &Path, corpus: &Corpus) -> Result<Vec<MetricsRecord>> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&corpus.manifest)?,
        )?;
        let metrics_path = dir.join("metrics.jsonl");
        if metrics_path.exists() {
            let kept: Vec<_> = read_jsonl_file(&metrics_path)?
                .into_iter()
                .filter(|r| r.step < self.step)
                .collect();
            let mut w = BufWriter::new(File::create(&metrics_path)?);
            write_jsonl(&kept, &mut w)?;
            w.flush()?;
        }
        let gaps_path = dir.join("transitions.jsonl");
        if gaps_path.exists() {
            // a split lands just before the checkpoint of its step, a merge just after
            let mut kept = String::new();
            for line in fs::read_to_string(&gaps_path)?.lines().filter(|l| !l.trim().is_empty()) {
                let g: TransitionGap = serde_json::from_str(line)?;
                if g.step < self.step || (g.step == self.step && g.to == Phase::Sparse) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&gaps_path, kept)?;
        }
        let mut sink = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics_path)?);
        let until = until.min(self.config.steps);
        let mut out = Vec::new();
        let mut gaps_written = self.transition_gaps.len();
        while self.step < until {
            let rec = self.train_step()?;
            write_jsonl(std::slice::from_ref(&rec), &mut sink)?;
            if self.transition_gaps.len() > gaps_written {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("transitions.jsonl"))?;
                for g in &self.transition_gaps[gaps_written..] {
                    writeln!(f, "{}", serde_json::to_string(g)?)?;
                }
                gaps_written = self.transition_gaps.len();
            }
            out.push(rec);
            if self.step.is_multiple_of(self.config.checkpoint_interval) {
                sink.flush()?;
                save_checkpoint(&self.checkpoint()?, &dir.join(format!("ckpt_{:08}.bin", self.step)))?;
            }
        }
        sink.flush()?;
        if self.is_done() {
            save_checkpoint(&self.checkpoint()?, &dir.join("final.bin"))?;
        }
        Ok(out)
    }
}
