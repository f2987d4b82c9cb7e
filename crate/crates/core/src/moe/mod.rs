//! Dense ↔ mixture-of-experts conversion, centroid gating, sparse
//! forward/backward, dynamic top-k, and FLOP accounting.

mod dynamic;
pub mod flops;
mod smoe;

pub use dynamic::{dynamic_topk, kept_pair_budget};
pub use flops::{sparse_ffn_fraction, FlopsEstimate, FlopsMode, FlopsModel};
pub use smoe::{
    compute_centroids, gate, merge_experts, smoe_backward, smoe_forward, split_ffn, Expert, GateDecision, Routing,
    SmoeBackward, SmoeFfn, SmoeForward,
};
