use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::moe::GateDecision;
use crate::numerics::ceil_tolerant;

/// Batch-level truncation of `(token, expert)` candidates.
///
/// All selected pairs in the batch are pooled and ranked by raw score
/// (descending; ties by token then expert index). The top
/// `⌈(1 − ratio) · candidates⌉` survive. Each token additionally keeps its own
/// highest-scoring expert, so no token ends up with an empty expert set.
pub fn dynamic_topk(decisions: &[GateDecision], truncation_ratio: f64) -> Result<Vec<GateDecision>> {
    if !(0.0..1.0).contains(&truncation_ratio) {
        return Err(Error::InvalidArgument(format!(
            "truncation ratio must be in [0, 1), got {truncation_ratio}"
        )));
    }
    let mut pairs: Vec<(f64, usize, usize)> = decisions
        .iter()
        .enumerate()
        .flat_map(|(t, d)| d.selected.iter().map(move |&e| (d.scores[e], t, e)))
        .collect();
    let keep = kept_pair_budget(pairs.len(), truncation_ratio);
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); decisions.len()];
    for &(_, t, e) in pairs.iter().take(keep) {
        kept[t].push(e);
    }
    let mut out = Vec::with_capacity(decisions.len());
    for (t, d) in decisions.iter().enumerate() {
        // `selected` is ranked, so its head is the token's best expert
        let protected = d.selected.first().copied();
        let selected: Vec<usize> = d
            .selected
            .iter()
            .copied()
            .filter(|e| kept[t].contains(e) || Some(*e) == protected)
            .collect();
        out.push(GateDecision {
            scores: d.scores.clone(),
            selected,
        });
    }
    Ok(out)
}

/// `⌈(1 − ratio) · candidates⌉`, before protected re-additions.
pub fn kept_pair_budget(candidates: usize, truncation_ratio: f64) -> usize {
    (ceil_tolerant((1.0 - truncation_ratio) * candidates as f64) as usize).min(candidates)
}
