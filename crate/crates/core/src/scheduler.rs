//! The dense/sparse phase machine. Sparse phases start when the monitored
//! similarity crosses a threshold and last a bounded number of steps; the
//! end of training is always dense.
//!
//! Step protocol used by the trainer, for every step `s`:
//!
//! 1. [`SchedulerState::advance`] may end a sparse phase or enter the final
//!    dense window; a returned [`Action::Merge`] must be applied before `s` runs.
//! 2. run step `s` in the current phase, then [`SchedulerState::record_step`].
//! 3. if [`SchedulerState::should_monitor`], measure similarity and call
//!    [`SchedulerState::on_monitor`]; a `true` result means the model must be
//!    split now, so that step `s + 1` runs sparse.

use serde::{Deserialize, Serialize};

use crate::analysis::{mean, partition_ari};
use crate::clustering::{cluster_with_warmstart, Partition};
use crate::error::{Error, Result};
use crate::model::{FeedForward, Gpt};
use crate::moe::{merge_experts, split_ffn};
use crate::numerics::{ceil_tolerant, AdamState, ParamSet, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Switch to sparse when similarity is strictly greater than `tau`.
    Threshold,
    /// Switch to sparse with probability `p` at every monitor point.
    Random { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsdConfig {
    /// Similarity threshold.
    pub tau: f64,
    /// Sparse-step ratio `r`.
    pub sparse_ratio: f64,
    /// Final dense ratio `l`.
    pub final_ratio: f64,
    pub monitor_interval: u64,
    pub total_steps: u64,
    pub policy: Policy,
    pub n_experts: usize,
    pub top_k: usize,
    /// Zero the optimizer moments at every transition instead of re-routing them.
    pub reset_adam: bool,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            sparse_ratio: 0.5,
            final_ratio: 0.1,
            monitor_interval: 3000,
            total_steps: 200_000,
            policy: Policy::Threshold,
            n_experts: 32,
            top_k: 6,
            reset_adam: false,
        }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scheduler(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.sparse_ratio.is_nan() || self.sparse_ratio < 0.0 {
            return bad(format!("sparse ratio must be >= 0, got {}", self.sparse_ratio));
        }
        if !(self.final_ratio >= 0.0 && self.final_ratio < 1.0) {
            return bad(format!("final ratio must be in [0, 1), got {}", self.final_ratio));
        }
        if self.sparse_ratio + self.final_ratio >= 1.0 {
            return bad(format!(
                "sparse ratio + final ratio must be < 1, got {}",
                self.sparse_ratio + self.final_ratio
            ));
        }
        if self.monitor_interval == 0 {
            return bad("monitor interval must be >= 1".into());
        }
        if let Policy::Random { p } = self.policy {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("random policy probability must be in [0, 1], got {p}"));
            }
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "need 1 <= top_k <= n_experts, got {} of {}",
                self.top_k, self.n_experts
            ));
        }
        Ok(())
    }

    /// First step of the final dense window; the window holds exactly
    /// `ceil(l · total_steps)` steps.
    pub fn final_dense_start(&self) -> u64 {
        self.total_steps
            .saturating_sub(ceil_tolerant(self.final_ratio * self.total_steps as f64))
    }

    /// `round(r / (1 − r − l) · last_dense_len)`, before truncation.
    pub fn raw_sparse_budget(&self, last_dense_len: u64) -> u64 {
        let factor = self.sparse_ratio / (1.0 - self.sparse_ratio - self.final_ratio);
        (factor * last_dense_len as f64).round() as u64
    }

    /// Sparse budget for a phase whose first step is `start`, truncated so
    /// the phase ends no later than the final dense window.
    pub fn sparse_budget(&self, last_dense_len: u64, start: u64) -> u64 {
        let room = self.final_dense_start().saturating_sub(start);
        self.raw_sparse_budget(last_dense_len).min(room)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dense,
    Sparse,
    FinalDense,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Sparse => "sparse",
            Phase::FinalDense => "final_dense",
        }
    }

    pub fn is_sparse(self) -> bool {
        self == Phase::Sparse
    }
}

/// A phase change; `step` is the first step run in the new phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub step: u64,
    pub from: Phase,
    pub to: Phase,
    pub similarity: Option<f64>,
}

/// What the trainer must do to the model before running the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    None,
    Merge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub phase: Phase,
    pub steps_in_phase: u64,
    /// Dense steps since the previous sparse phase ended (or since step 0).
    pub last_dense_len: u64,
    /// Length `T` of the current or most recent sparse phase.
    pub sparse_budget: u64,
    /// Most recent clustering of every layer; frozen while sparse.
    pub prev_partitions: Vec<Option<Partition>>,
    pub events: Vec<TransitionEvent>,
}

impl SchedulerState {
    pub fn new(n_layers: usize) -> Self {
        Self {
            phase: Phase::Dense,
            steps_in_phase: 0,
            last_dense_len: 0,
            sparse_budget: 0,
            prev_partitions: vec![None; n_layers],
            events: Vec::new(),
        }
    }

    fn enter(&mut self, to: Phase, step: u64, similarity: Option<f64>) {
        self.events.push(TransitionEvent {
            step,
            from: self.phase,
            to,
            similarity,
        });
        self.phase = to;
        self.steps_in_phase = 0;
    }

    /// Called before step `step` runs.
    pub fn advance(&mut self, cfg: &SsdConfig, step: u64) -> Action {
        if self.phase == Phase::FinalDense {
            return Action::None;
        }
        let was_sparse = self.phase.is_sparse();
        if step >= cfg.final_dense_start() {
            self.enter(Phase::FinalDense, step, None);
        } else if was_sparse && self.steps_in_phase == self.sparse_budget {
            self.enter(Phase::Dense, step, None);
            self.last_dense_len = 0;
        } else {
            return Action::None;
        }
        if was_sparse {
            Action::Merge
        } else {
            Action::None
        }
    }

    /// Called after every executed step.
    pub fn record_step(&mut self) {
        self.steps_in_phase += 1;
        if self.phase == Phase::Dense {
            self.last_dense_len += 1;
        }
    }

    pub fn should_monitor(&self, cfg: &SsdConfig) -> bool {
        self.phase == Phase::Dense
            && self.steps_in_phase > 0
            && self.steps_in_phase.is_multiple_of(cfg.monitor_interval)
    }

    /// Decides at a monitor point after step `step`. Returns `true` when the
    /// model must be split so that step `step + 1` runs sparse. `similarity`
    /// is `None` when there was nothing to compare against yet.
    pub fn on_monitor(
        &mut self,
        cfg: &SsdConfig,
        similarity: Option<f64>,
        step: u64,
        rng: &mut RngState,
    ) -> Result<bool> {
        if self.phase != Phase::Dense {
            return Err(Error::Scheduler(format!(
                "monitor called in {} phase at step {step}",
                self.phase.as_str()
            )));
        }
        let fire = match cfg.policy {
            Policy::Threshold => similarity.is_some_and(|s| s > cfg.tau),
            Policy::Random { p } => rng.uniform() < p,
        };
        if !fire {
            return Ok(false);
        }
        let budget = cfg.sparse_budget(self.last_dense_len, step + 1);
        if budget == 0 {
            return Ok(false);
        }
        self.sparse_budget = budget;
        self.enter(Phase::Sparse, step + 1, similarity);
        Ok(true)
    }
}

/// Phase of `step` as implied by an event log alone.
pub fn phase_at(events: &[TransitionEvent], step: u64) -> Phase {
    events
        .iter()
        .take_while(|e| e.step <= step)
        .last()
        .map_or(Phase::Dense, |e| e.to)
}

/// Clusters every dense layer's `W_in`, warm-started from the previous
/// partitions, and returns the mean ARI against them (`None` on the first
/// call). The new partitions replace the previous ones.
pub fn monitor_similarity(
    model: &Gpt,
    state: &mut SchedulerState,
    n_experts: usize,
    rng: &mut RngState,
) -> Result<Option<f64>> {
    let mut aris = Vec::with_capacity(model.n_layers());
    for (layer, block) in model.blocks.iter().enumerate() {
        let FeedForward::Dense(w) = &block.ffn else {
            return Err(Error::Scheduler(format!("layer {layer} is sparse during monitoring")));
        };
        let prev = state.prev_partitions[layer].as_ref();
        let outcome = cluster_with_warmstart(&w.w_in, n_experts, prev, rng)?;
        if let Some(prev) = prev {
            aris.push(partition_ari(prev, &outcome.partition)?);
        }
        state.prev_partitions[layer] = Some(outcome.partition);
    }
    Ok((aris.len() == model.n_layers() && !aris.is_empty()).then(|| mean(&aris)))
}

fn split_in_place(ffn: &mut FeedForward, p: &Partition, top_k: usize) -> Result<()> {
    if let FeedForward::Dense(w) = ffn {
        *ffn = FeedForward::Sparse(split_ffn(w, p, top_k)?);
    }
    Ok(())
}

fn merge_in_place(ffn: &mut FeedForward) -> Result<()> {
    if let FeedForward::Sparse(m) = ffn {
        *ffn = FeedForward::Dense(merge_experts(m)?);
    }
    Ok(())
}

/// Splits every layer by its partition. The optimizer moments are split with
/// the same partition so each accumulator stays with its parameter, unless
/// `reset_adam` asks for fresh moments.
pub fn transition_dense_to_sparse(
    model: &mut Gpt,
    adam: &mut AdamState<Gpt>,
    partitions: &[Partition],
    top_k: usize,
    reset_adam: bool,
) -> Result<()> {
    if partitions.len() != model.n_layers() {
        return Err(Error::Scheduler(format!(
            "{} partitions for {} layers",
            partitions.len(),
            model.n_layers()
        )));
    }
    for (layer, p) in partitions.iter().enumerate() {
        split_in_place(&mut model.blocks[layer].ffn, p, top_k)?;
        split_in_place(&mut adam.first_moment.blocks[layer].ffn, p, top_k)?;
        split_in_place(&mut adam.second_moment.blocks[layer].ffn, p, top_k)?;
    }
    if reset_adam {
        reset_moments(model, adam);
    }
    Ok(())
}

/// Concatenates the experts of every sparse layer back into a dense FFN,
/// moments included; gating state is dropped.
pub fn transition_sparse_to_dense(model: &mut Gpt, adam: &mut AdamState<Gpt>, reset_adam: bool) -> Result<()> {
    for layer in 0..model.n_layers() {
        merge_in_place(&mut model.blocks[layer].ffn)?;
        merge_in_place(&mut adam.first_moment.blocks[layer].ffn)?;
        merge_in_place(&mut adam.second_moment.blocks[layer].ffn)?;
    }
    if reset_adam {
        reset_moments(model, adam);
    }
    Ok(())
}

fn reset_moments(model: &Gpt, adam: &mut AdamState<Gpt>) {
    adam.first_moment = model.zeros_like();
    adam.second_moment = model.zeros_like();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: u64) -> SsdConfig {
        SsdConfig {
            total_steps: total,
            ..SsdConfig::default()
        }
    }

    #[test]
    fn budget_arithmetic() {
        let c = cfg(200_000);
        assert_eq!(c.raw_sparse_budget(18_000), 22_500);
        assert_eq!(c.raw_sparse_budget(6_000), 7_500);
        assert_eq!(c.final_dense_start(), 180_000);
        assert_eq!(c.sparse_budget(18_000, 170_000), 10_000);
    }

    #[test]
    fn validation() {
        assert!(cfg(10).validate().is_ok());
        for bad in [
            SsdConfig { tau: 0.0, ..cfg(10) },
            SsdConfig { tau: 1.5, ..cfg(10) },
            SsdConfig {
                sparse_ratio: 0.9,
                ..cfg(10)
            },
            SsdConfig {
                final_ratio: 1.0,
                ..cfg(10)
            },
            SsdConfig {
                monitor_interval: 0,
                ..cfg(10)
            },
            SsdConfig { top_k: 33, ..cfg(10) },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn strict_threshold() {
        let c = cfg(1000);
        let mut rng = RngState::new(0);
        let mut s = SchedulerState::new(1);
        s.last_dense_len = 100;
        assert!(!s.on_monitor(&c, Some(0.9), 99, &mut rng).unwrap());
        assert!(!s.on_monitor(&c, None, 99, &mut rng).unwrap());
        assert!(s.on_monitor(&c, Some(0.9 + 1e-12), 99, &mut rng).unwrap());
        assert_eq!(s.phase, Phase::Sparse);
        assert_eq!(s.sparse_budget, 125);
        assert!(s.on_monitor(&c, Some(1.0), 100, &mut rng).is_err());
    }

    #[test]
    fn sparse_phase_ends_after_budget() {
        let c = SsdConfig {
            monitor_interval: 10,
            ..cfg(100)
        };
        let mut rng = RngState::new(0);
        let mut s = SchedulerState::new(1);
        for step in 0..10 {
            assert_eq!(s.advance(&c, step), Action::None);
            s.record_step();
        }
        assert!(s.should_monitor(&c));
        assert!(s.on_monitor(&c, Some(1.0), 9, &mut rng).unwrap());
        let t = s.sparse_budget;
        assert_eq!(t, 13);
        for step in 10..10 + t {
            assert_eq!(s.advance(&c, step), Action::None);
            assert_eq!(s.phase, Phase::Sparse);
            s.record_step();
        }
        assert_eq!(s.advance(&c, 10 + t), Action::Merge);
        assert_eq!(s.phase, Phase::Dense);
        assert_eq!(s.last_dense_len, 0);
        assert_eq!(phase_at(&s.events, 9), Phase::Dense);
        assert_eq!(phase_at(&s.events, 10), Phase::Sparse);
        assert_eq!(phase_at(&s.events, 10 + t), Phase::Dense);
    }

    #[test]
    fn final_dense_is_absorbing() {
        let c = cfg(50);
        let mut s = SchedulerState::new(1);
        for step in 0..50 {
            s.advance(&c, step);
            assert_eq!(s.phase == Phase::FinalDense, step >= 45);
            s.record_step();
        }
    }
}
