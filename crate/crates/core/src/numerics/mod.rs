//! Dense linear algebra, differentiable primitives, the optimizer, and the
//! learning-rate schedule. All arithmetic is 64-bit.

mod adam;
mod matrix;
pub mod ops;
mod rng;

pub use adam::{noam_lr, AdamConfig, AdamState, ParamSet};
pub use matrix::Matrix;
pub(crate) use matrix::{dot, matmul_t_unchecked, matmul_unchecked, t_matmul_unchecked};
pub use rng::{RngSnapshot, RngState};

/// `ceil(x)` that ignores floating-point noise just above an integer
/// (e.g. `0.1 * 30.0 = 3.0000000000000004`).
pub fn ceil_tolerant(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}
